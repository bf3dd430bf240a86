//! Report rendering: stable-key JSON and an aligned-column text table.

use crate::cost::CostReport;

pub fn to_json(report: &CostReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

fn group(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn to_table(report: &CostReport) -> String {
    let mut rows: Vec<[String; 5]> = vec![[
        "layer".into(),
        "flops".into(),
        "params".into(),
        "params+buffers".into(),
        "activations".into(),
    ]];
    for l in &report.layers {
        rows.push([
            l.name.clone(),
            group(l.flops),
            group(l.params_learnable),
            group(l.params_with_buffers),
            group(l.activation_elements),
        ]);
    }
    rows.push([
        "TOTAL".into(),
        group(report.total.flops),
        group(report.total.params_learnable),
        group(report.total.params_with_buffers),
        group(report.total.activation_elements),
    ]);
    let mut widths = [0usize; 5];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = format!(
        "model: {} @ {}x{} (1 MAC = 1 FLOP)\n",
        report.model, report.input_size, report.input_size
    );
    for (ri, row) in rows.iter().enumerate() {
        let mut line = String::new();
        for (ci, cell) in row.iter().enumerate() {
            if ci == 0 {
                line.push_str(&format!("{:<w$}  ", cell, w = widths[0]));
            } else {
                line.push_str(&format!("{:>w$}  ", cell, w = widths[ci]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if ri == 0 {
            let dash: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(dash));
            out.push('\n');
        }
    }
    for note in &report.notes {
        out.push_str(&format!("note: {note}\n"));
    }
    out
}
