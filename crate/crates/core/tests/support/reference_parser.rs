//! A reply parser written independently of `annotator_core::parser`,
//! walking characters by hand instead of using string-splitting helpers,
//! plus a generator of replies in the shapes models produce.

#![allow(dead_code)]

use annotator_core::parser::{Prediction, ReplyShape};
use annotator_core::taxonomy::{SubjectCode, Taxonomy};
use proptest::prelude::*;

fn is_ws(c: char) -> bool {
    c.is_whitespace()
}

pub fn reference_normalize(token: &[char]) -> String {
    let mut out: Vec<char> = Vec::new();
    let mut pending_space = false;
    for &c in token {
        if is_ws(c) {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        for lower in c.to_lowercase() {
            out.push(lower);
        }
    }
    while let Some(&last) = out.last() {
        if last == '.' || last == ',' || last == ';' || last == ':' || is_ws(last) {
            out.pop();
        } else {
            break;
        }
    }
    out.into_iter().collect()
}

/// Index just past the last case-insensitive `categories:`.
fn after_marker(chars: &[char]) -> usize {
    let marker: Vec<char> = "categories:".chars().collect();
    let mut found = 0;
    if chars.len() >= marker.len() {
        for start in 0..=chars.len() - marker.len() {
            let mut hit = true;
            for (i, &m) in marker.iter().enumerate() {
                if chars[start + i].to_ascii_lowercase() != m {
                    hit = false;
                    break;
                }
            }
            if hit {
                found = start + marker.len();
            }
        }
    }
    found
}

fn split_lines(chars: &[char]) -> Vec<Vec<char>> {
    let mut lines = Vec::new();
    let mut current = Vec::new();
    for &c in chars {
        if c == '\n' {
            if current.last() == Some(&'\r') {
                current.pop();
            }
            lines.push(std::mem::take(&mut current));
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        lines.push(current);
    }
    lines
}

fn blank(line: &[char]) -> bool {
    line.iter().all(|&c| is_ws(c))
}

fn ends_with_colon(line: &[char]) -> bool {
    let mut i = line.len();
    while i > 0 && is_ws(line[i - 1]) {
        i -= 1;
    }
    i > 0 && line[i - 1] == ':'
}

/// Text after a leading `<digits>.`, if present.
fn numbered_rest(line: &[char]) -> Option<Vec<char>> {
    let mut i = 0;
    while i < line.len() && is_ws(line[i]) {
        i += 1;
    }
    let digits_start = i;
    while i < line.len() && line[i].is_ascii_digit() {
        i += 1;
    }
    if i > digits_start && i < line.len() && line[i] == '.' {
        Some(line[i + 1..].to_vec())
    } else {
        None
    }
}

pub fn reference_parse(raw: &str, taxonomy: &Taxonomy) -> Prediction {
    let chars: Vec<char> = raw.chars().collect();
    let body = &chars[after_marker(&chars)..];
    let mut lines = split_lines(body);
    let mut last_colon = None;
    for (i, line) in lines.iter().enumerate() {
        if ends_with_colon(line) {
            last_colon = Some(i);
        }
    }
    if let Some(i) = last_colon {
        lines.drain(..=i);
    }
    lines.retain(|l| !blank(l));

    let numbered = lines.first().map(|l| numbered_rest(l).is_some()).unwrap_or(false);
    let mut tokens: Vec<Vec<char>> = Vec::new();
    for line in &lines {
        if numbered {
            tokens.push(numbered_rest(line).unwrap_or_else(|| line.clone()));
        } else {
            let mut current = Vec::new();
            for &c in line {
                if c == '/' {
                    tokens.push(std::mem::take(&mut current));
                } else {
                    current.push(c);
                }
            }
            tokens.push(current);
        }
    }

    let labels: Vec<(String, String)> = taxonomy
        .divisions()
        .iter()
        .map(|d| (reference_normalize(&d.label.chars().collect::<Vec<_>>()), d.code.clone()))
        .collect();
    let mut codes = Vec::new();
    let mut dropped = Vec::new();
    let mut saw_token = false;
    for token in tokens {
        let norm = reference_normalize(&token);
        if norm.is_empty() {
            continue;
        }
        saw_token = true;
        let mut matched = None;
        for (label, code) in &labels {
            if *label == norm {
                matched = Some(code.clone());
            }
        }
        match matched {
            Some(code) => {
                let code = SubjectCode::Division(code);
                if !codes.contains(&code) {
                    codes.push(code);
                }
            }
            None => dropped.push(norm),
        }
    }
    while codes.len() > 3 {
        codes.pop();
    }
    if codes.is_empty() {
        codes.push(SubjectCode::Others);
    }
    let shape = if !saw_token {
        ReplyShape::Empty
    } else if numbered {
        ReplyShape::Numbered
    } else {
        ReplyShape::Slash
    };
    Prediction {
        codes,
        raw: raw.to_string(),
        dropped_tokens: dropped,
        shape,
    }
}

const NOISE: &[&str] = &[
    "unknown",
    "geology",
    "N/A",
    "",
    "   ",
    "science",
    "Categories",
    "earth",
    "economics, commerce",
    "Ünïcödé",
];

#[derive(Debug, Clone)]
enum Piece {
    Label(usize, u8),
    Noise(usize),
}

fn piece() -> impl Strategy<Value = Piece> {
    prop_oneof![
        3 => (0usize..22, 0u8..4).prop_map(|(i, case)| Piece::Label(i, case)),
        1 => (0..NOISE.len()).prop_map(Piece::Noise),
    ]
}

fn render_piece(piece: &Piece, labels: &[String]) -> String {
    match piece {
        Piece::Label(i, case) => match case {
            0 => labels[*i].clone(),
            1 => labels[*i].to_uppercase(),
            2 => labels[*i]
                .split(' ')
                .map(|w| {
                    let mut cs = w.chars();
                    cs.next()
                        .map(|f| f.to_uppercase().chain(cs).collect::<String>())
                        .unwrap_or_default()
                })
                .collect::<Vec<_>>()
                .join(" "),
            _ => labels[*i].replace(' ', "  "),
        },
        Piece::Noise(i) => NOISE[*i].to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct Reply {
    pieces: Vec<Piece>,
    separator: u8,
    numbered: bool,
    preamble: u8,
    trailing: u8,
    crlf: bool,
}

pub fn reply() -> impl Strategy<Value = Reply> {
    (
        proptest::collection::vec(piece(), 0..6),
        0u8..4,
        any::<bool>(),
        0u8..4,
        0u8..4,
        any::<bool>(),
    )
        .prop_map(|(pieces, separator, numbered, preamble, trailing, crlf)| Reply {
            pieces,
            separator,
            numbered,
            preamble,
            trailing,
            crlf,
        })
}

pub fn render_reply(reply: &Reply, labels: &[String]) -> String {
    let nl = if reply.crlf { "\r\n" } else { "\n" };
    let tokens: Vec<String> = reply.pieces.iter().map(|p| render_piece(p, labels)).collect();
    let body = if reply.numbered {
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}. {t}", i + 1))
            .collect::<Vec<_>>()
            .join(nl)
    } else {
        let sep = match reply.separator {
            0 => " / ".to_string(),
            1 => "/".to_string(),
            2 => nl.to_string(),
            _ => " /  ".to_string(),
        };
        tokens.join(&sep)
    };
    let punct = match reply.trailing {
        0 => "",
        1 => ".",
        2 => " .",
        _ => ";",
    };
    let pre = match reply.preamble {
        0 => String::new(),
        1 => format!("The relevant categories are:{nl}{nl}"),
        2 => "Categories: ".to_string(),
        _ => format!("Dataset title: x Categories:{nl}"),
    };
    format!("{pre}{body}{punct}")
}
