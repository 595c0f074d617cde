#![allow(dead_code)]

/// One transcribed table row: ENet cell, BoxENet cell, bold marker.
pub struct GoldenRow {
    pub enet: String,
    pub boxenet: String,
    pub bold: bool,
}

pub fn golden_table() -> Vec<GoldenRow> {
    let text = include_str!("../golden/enet_boxenet_rows.txt");
    text.lines()
        .map(|line| {
            let (l, r) = line.split_once(" | ").expect("two columns");
            let strip = |c: &str| c.trim_start_matches("**").trim_end_matches("**").to_string();
            let bold = l.starts_with("**");
            assert_eq!(bold, r.starts_with("**"), "bold marker on one side only: {line}");
            GoldenRow { enet: strip(l), boxenet: strip(r), bold }
        })
        .collect()
}
