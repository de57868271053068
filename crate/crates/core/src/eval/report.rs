use crate::encoder::{AttentionEntry, AttentionReport};
use crate::vocab::SPECIAL_TOKENS;

/// Top `k` non-special tokens by final-layer head-mean attention; ties keep
/// positional order.
pub fn rank_tokens(report: &AttentionReport, k: usize) -> Vec<AttentionEntry> {
    let mut entries: Vec<AttentionEntry> =
        report.aggregate.iter().filter(|e| !SPECIAL_TOKENS.contains(&e.token.as_str())).cloned().collect();
    entries.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.position.cmp(&b.position)));
    entries.truncate(k);
    entries
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained page: one bar chart per head plus the head-mean, with the
/// full report embedded as JSON in a data script.
pub fn attention_html(report: &AttentionReport) -> String {
    let mut body = String::new();
    let mut table = |title: &str, entries: &[AttentionEntry]| {
        body.push_str(&format!("<h2>{}</h2>\n<table>\n<tr><th>#</th><th>token</th><th>segment</th><th>attention</th></tr>\n", escape(title)));
        for e in entries {
            body.push_str(&format!(
                "<tr><td>{}</td><td>{}</td><td>{}</td><td><span class=\"bar\" style=\"width:{:.1}px\"></span> {:.4}</td></tr>\n",
                e.position,
                escape(&e.token),
                escape(&e.segment),
                (e.probability * 400.0).max(0.0),
                e.probability
            ));
        }
        body.push_str("</table>\n");
    };
    table("final layer, mean over heads", &report.aggregate);
    for h in &report.heads {
        table(&format!("layer {} head {}", h.layer, h.head), &h.entries);
    }
    let top: Vec<String> = report
        .variables
        .iter()
        .take(10)
        .map(|(v, s)| format!("<li>{} ({:.3})</li>", escape(v), s))
        .collect();
    let data = report.to_json().replace("</", "<\\/");
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Attention for {id}</title>\n\
<style>body{{font-family:sans-serif}}table{{border-collapse:collapse;margin-bottom:2em}}td,th{{padding:2px 8px;text-align:left}}.bar{{display:inline-block;height:10px;background:#3b6ea5}}</style>\n\
</head><body>\n<h1>Beneficiary {bene}, stay {id}</h1>\n<p>predicted readmission probability {p:.4}; observed label {label}</p>\n\
<h2>variables by attention</h2>\n<ol>{top}</ol>\n{body}\
<script type=\"application/json\" id=\"attention-data\">{data}</script>\n</body></html>\n",
        id = escape(&report.sample_id),
        bene = escape(&report.beneficiary_id),
        p = report.probability,
        label = report.label,
        top = top.join(""),
    )
}
