//! Static HTML token-highlight reports.
//!
//! Each token's background intensity is its score min-max normalized over
//! the finite scores of its sentence. When every finite score is equal the
//! intensity is 0.5 throughout. Non-finite scores mark special tokens, which
//! are drawn dim; padding is left out. Normalization is for display only.

use std::fmt::Write;

use crate::attribution::AttributionResult;
use crate::tokenizer::PAD;

/// One column of the report: a label and one result per sentence.
#[derive(Debug, Clone)]
pub struct ReportColumn {
    pub label: String,
    pub results: Vec<AttributionResult>,
}

/// Display intensities in `[0, 1]`; `None` for non-finite scores.
pub fn intensities(scores: &[f64]) -> Vec<Option<f64>> {
    let finite = scores.iter().copied().filter(|s| s.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s), hi.max(s))
    });
    scores
        .iter()
        .map(|&s| {
            if !s.is_finite() {
                None
            } else if hi > lo {
                Some((s - lo) / (hi - lo))
            } else {
                Some(0.5)
            }
        })
        .collect()
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em}\
table{border-collapse:collapse}\
th,td{border:1px solid #ccc;padding:.4em .6em;vertical-align:top;text-align:left}\
.tok{display:inline-block;margin:1px;padding:0 2px;border-radius:2px}\
.special{color:#999}";

fn render_sentence(out: &mut String, result: &AttributionResult) {
    let scores = result.scores();
    for (tok, level) in result.tokens.iter().zip(intensities(&scores)) {
        if tok.text == PAD {
            continue;
        }
        let text = escape(&tok.text);
        match level {
            None => {
                let _ = write!(out, "<span class=\"tok special\">{text}</span>");
            }
            Some(a) => {
                let _ = write!(
                    out,
                    "<span class=\"tok\" style=\"background:rgba(220,50,30,{a:.3})\" title=\"{:.6e}\">{text}</span>",
                    tok.score
                );
            }
        }
    }
}

/// Renders a self-contained page with one row per sentence and one column
/// per input.
pub fn render_html(title: &str, columns: &[ReportColumn]) -> String {
    let rows = columns.iter().map(|c| c.results.len()).max().unwrap_or(0);
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, "<style>{STYLE}</style>");
    out.push_str("</head>\n<body>\n");
    let _ = writeln!(out, "<h1>{}</h1>", escape(title));
    out.push_str("<table>\n<tr><th>#</th>");
    for c in columns {
        let _ = write!(out, "<th>{}</th>", escape(&c.label));
    }
    out.push_str("</tr>\n");
    for i in 0..rows {
        let _ = write!(out, "<tr><td>{i}</td>");
        for c in columns {
            out.push_str("<td>");
            if let Some(r) = c.results.get(i) {
                let _ = write!(out, "<div><small>{}", r.method);
                if let Some(class) = r.class_id {
                    let _ = write!(out, ", class {class}");
                }
                out.push_str("</small></div>");
                render_sentence(&mut out, r);
            }
            out.push_str("</td>");
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</table>\n</body>\n</html>\n");
    out
}
