//! Table mode rendering of API bodies.

use memgrain_core::llm::iso8601;
use serde_json::Value;

fn s(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn time(v: &Value) -> String {
    v.as_u64().map_or_else(|| s(v), iso8601)
}

/// Left-aligned columns; the last column is never padded or cut.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let last = cells.len() - 1;
        for (i, c) in cells.iter().enumerate() {
            if i == last {
                out.push_str(c);
            } else {
                out.push_str(&format!("{c:<w$}  ", w = width[i]));
            }
        }
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    for row in rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn hits(body: &Value) -> String {
    let rows: Vec<Vec<String>> = body["hits"]
        .as_array()
        .map(Vec::as_slice)
        .unwrap_or_default()
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let r = &h["record"];
            vec![
                (i + 1).to_string(),
                format!("{:.4}", h["score"].as_f64().unwrap_or(0.0)),
                s(&r["type"]),
                time(&r["created_at"]),
                s(&r["id"]),
                s(&r["content"]),
            ]
        })
        .collect();
    if rows.is_empty() {
        return "no memories cleared the threshold\n".into();
    }
    table(&["RANK", "SCORE", "TYPE", "CREATED", "ID", "CONTENT"], &rows)
}

pub fn memories(body: &Value) -> String {
    let rows: Vec<Vec<String>> = body["memories"]
        .as_array()
        .map(Vec::as_slice)
        .unwrap_or_default()
        .iter()
        .map(|r| vec![s(&r["id"]), s(&r["type"]), s(&r["state"]), time(&r["created_at"]), s(&r["content"])])
        .collect();
    if rows.is_empty() {
        return "no memories\n".into();
    }
    table(&["ID", "TYPE", "STATE", "CREATED", "CONTENT"], &rows)
}

pub fn conflicts(body: &Value) -> String {
    let rows: Vec<Vec<String>> = body["conflicts"]
        .as_array()
        .map(Vec::as_slice)
        .unwrap_or_default()
        .iter()
        .map(|c| {
            let cands: Vec<String> = c["candidates"]
                .as_array()
                .map(Vec::as_slice)
                .unwrap_or_default()
                .iter()
                .map(|x| format!("{} ({:.4})", s(&x["id"]), x["score"].as_f64().unwrap_or(0.0)))
                .collect();
            vec![s(&c["conflict_id"]), s(&c["state"]), time(&c["opened_at"]), s(&c["new_record"]), cands.join(", ")]
        })
        .collect();
    if rows.is_empty() {
        return "no conflicts\n".into();
    }
    table(&["CONFLICT", "STATE", "OPENED", "NEW RECORD", "CANDIDATES"], &rows)
}

pub fn sessions(body: &Value) -> String {
    let rows: Vec<Vec<String>> = body["sessions"]
        .as_array()
        .map(Vec::as_slice)
        .unwrap_or_default()
        .iter()
        .map(|x| vec![s(&x["session_id"]), time(&x["start"]), time(&x["end"])])
        .collect();
    if rows.is_empty() {
        return "no sessions\n".into();
    }
    table(&["SESSION", "START", "END"], &rows)
}

pub fn answer(body: &Value) -> String {
    let cites: Vec<String> = body["citations"].as_array().map(Vec::as_slice).unwrap_or_default().iter().map(s).collect();
    let mut out = format!("{}\n", s(&body["answer"]));
    if !cites.is_empty() {
        out.push_str(&format!("\ncitations: {}\n", cites.join(", ")));
    }
    out
}

pub fn resolved(body: &Value) -> String {
    let c = &body["conflict"];
    let r = &body["new_record"];
    let mut out = format!(
        "resolved {} with {}; record {} is {}\n",
        s(&c["conflict_id"]),
        s(&c["resolution"]["action"]),
        s(&r["id"]),
        s(&r["state"])
    );
    for cand in body["candidates"].as_array().map(Vec::as_slice).unwrap_or_default() {
        out.push_str(&format!("  {} is {}\n", s(&cand["id"]), s(&cand["state"])));
    }
    out
}

/// Printed to stderr after a write that opened conflicts.
pub fn conflict_notes(body: &Value) -> String {
    let mut out = String::new();
    for c in body["conflicts"].as_array().map(Vec::as_slice).unwrap_or_default() {
        let n = c["candidates"].as_array().map_or(0, Vec::len);
        out.push_str(&format!(
            "conflict {} opened against {n} existing record(s); the new memory stays provisional until \
             `memgrain conflicts resolve {} --action supersede|retain|annotate`\n",
            s(&c["conflict_id"]),
            s(&c["conflict_id"])
        ));
    }
    out
}

pub fn error(body: &str, status: u16) -> String {
    match serde_json::from_str::<Value>(body) {
        Ok(v) if v["code"].is_string() => format!("error: {} ({})\n", s(&v["message"]), s(&v["code"])),
        _ => format!("error: server returned {status}: {body}\n"),
    }
}
