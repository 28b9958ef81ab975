//! Line-oriented text format.
//!
//! ```text
//! graph nodes=4
//! u = Input([16],unbatched) inputs=[] domain=User
//! t = Tile() inputs=[u] domain=none
//! i = Input([8],batched) inputs=[] domain=Item
//! c = Concat() inputs=[t,i] domain=none layout=[(User,16),(Item,8)]
//! ```
//!
//! One node per line, `#` starts a comment. The optional `graph nodes=N`
//! header lets the parser detect truncated files.

use std::collections::HashSet;
use std::fmt::Write as _;

use super::{FeatureDomain, FeatureLayout, Graph, GraphBuilder, NodeKind, Segment, WeightInit};
use crate::error::{Error, Result};

pub fn serialize(g: &Graph) -> String {
    let mut out = String::new();
    writeln!(out, "graph nodes={}", g.len()).unwrap();
    for n in g.nodes() {
        write!(out, "{} = {}({})", n.id, n.kind.tag().name(), args(&n.kind)).unwrap();
        let ins: Vec<&str> = n.inputs.iter().map(|&i| g.name(i)).collect();
        write!(out, " inputs=[{}]", ins.join(",")).unwrap();
        match &n.kind {
            NodeKind::Input { domain, .. } => write!(out, " domain={domain}").unwrap(),
            _ => out.push_str(" domain=none"),
        }
        if let NodeKind::Concat { layout } = &n.kind {
            write!(out, " layout={layout}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn dims_list(d: &[usize]) -> String {
    let parts: Vec<String> = d.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn compress_rows(rows: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let mut j = i;
        while j + 1 < rows.len() && rows[j + 1] == rows[j] + 1 {
            j += 1;
        }
        if j > i {
            parts.push(format!("{}..{}", rows[i], rows[j] + 1));
        } else {
            parts.push(rows[i].to_string());
        }
        i = j + 1;
    }
    format!("[{}]", parts.join(","))
}

fn args(kind: &NodeKind) -> String {
    match kind {
        NodeKind::Input { dims, batched, .. } => format!(
            "{},{}",
            dims_list(dims),
            if *batched { "batched" } else { "unbatched" }
        ),
        NodeKind::Weight { rows, cols, init } => {
            let mut s = format!("{rows},{cols},seed={}", init.seed);
            if let Some(sel) = &init.rows {
                write!(s, ",base={},rows={}", init.base_rows, compress_rows(sel)).unwrap();
            } else if init.base_rows != *rows {
                write!(s, ",base={}", init.base_rows).unwrap();
            }
            s
        }
        NodeKind::MatMulMaRI { split } => format!("{},{},{}", split[0], split[1], split[2]),
        NodeKind::CrossAttention {
            d_q,
            d_kv,
            d_hidden,
        } => format!("{d_q},{d_kv},{d_hidden}"),
        NodeKind::Reshape { dims } => dims_list(dims),
        NodeKind::Slice { start, width } => format!("{start},{width}"),
        NodeKind::GatedSum { experts } => experts.to_string(),
        _ => String::new(),
    }
}

struct Line<'a> {
    no: usize,
    text: &'a str,
}

impl Line<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.no,
            message: msg.into(),
        }
    }
}

/// Splits on top-level commas (ignoring commas inside brackets).
fn split_top(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    let last = s[start..].trim();
    if !last.is_empty() || !out.is_empty() {
        out.push(last);
    }
    out
}

/// Index of the bracket closing the one at `open`.
fn matching(s: &str, open: usize) -> Option<usize> {
    let mut depth = 0i32;
    for (i, c) in s[open..].char_indices() {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => {
                depth -= 1;
                if depth == 0 {
                    return Some(open + i);
                }
            }
            _ => {}
        }
    }
    None
}

fn num(line: &Line, s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| line.err(format!("expected a number for {what}, found `{s}`")))
}

fn bracketed<'a>(line: &Line, s: &'a str, what: &str) -> Result<&'a str> {
    let s = s.trim();
    if s.starts_with('[') && s.ends_with(']') && s.len() >= 2 {
        Ok(&s[1..s.len() - 1])
    } else {
        Err(line.err(format!("expected a bracketed list for {what}, found `{s}`")))
    }
}

fn num_list(line: &Line, s: &str, what: &str) -> Result<Vec<usize>> {
    let inner = bracketed(line, s, what)?;
    split_top(inner)
        .into_iter()
        .filter(|p| !p.is_empty())
        .map(|p| num(line, p, what))
        .collect()
}

fn row_list(line: &Line, s: &str) -> Result<Vec<usize>> {
    let inner = bracketed(line, s, "rows")?;
    let mut out = Vec::new();
    for p in split_top(inner).into_iter().filter(|p| !p.is_empty()) {
        if let Some((a, b)) = p.split_once("..") {
            let (a, b) = (num(line, a, "rows")?, num(line, b, "rows")?);
            if b < a {
                return Err(line.err(format!("descending row range `{p}`")));
            }
            out.extend(a..b);
        } else {
            out.push(num(line, p, "rows")?);
        }
    }
    Ok(out)
}

fn parse_layout(line: &Line, s: &str) -> Result<FeatureLayout> {
    let inner = bracketed(line, s, "layout")?;
    let mut segs = Vec::new();
    for p in split_top(inner).into_iter().filter(|p| !p.is_empty()) {
        let body = p
            .strip_prefix('(')
            .and_then(|x| x.strip_suffix(')'))
            .ok_or_else(|| line.err(format!("layout segment `{p}` must look like (Domain,width)")))?;
        let (d, w) = body
            .split_once(',')
            .ok_or_else(|| line.err(format!("layout segment `{p}` must look like (Domain,width)")))?;
        let domain = FeatureDomain::parse(d.trim())
            .ok_or_else(|| line.err(format!("unknown feature domain `{}`", d.trim())))?;
        segs.push(Segment {
            domain,
            width: num(line, w, "layout width")?,
        });
    }
    FeatureLayout::new(segs).map_err(|e| line.err(e.to_string()))
}

fn want_args<'a>(line: &Line, kind: &str, a: &'a [&'a str], n: usize) -> Result<&'a [&'a str]> {
    if a.len() != n {
        return Err(line.err(format!("{kind} takes {n} argument(s), got {}", a.len())));
    }
    Ok(a)
}

struct Parsed {
    id: String,
    kind: NodeKind,
    inputs: Vec<String>,
    layout_given: bool,
    line: usize,
}

fn parse_line(line: &Line) -> Result<Parsed> {
    let (id, rest) = line
        .text
        .split_once('=')
        .ok_or_else(|| line.err("expected `<id> = <Kind>(<args>) ...`"))?;
    let id = id.trim();
    if id.is_empty() || id.contains(|c: char| c.is_whitespace() || ",[]()".contains(c)) {
        return Err(line.err(format!("invalid node id `{id}`")));
    }
    let rest = rest.trim_start();
    let open = rest
        .find('(')
        .ok_or_else(|| line.err("missing `(` after node kind"))?;
    let kind_name = rest[..open].trim();
    let close = matching(rest, open).ok_or_else(|| line.err("unterminated argument list"))?;
    let arg_str = &rest[open + 1..close];
    let a = split_top(arg_str);

    let mut inputs: Option<Vec<String>> = None;
    let mut domain: Option<Option<FeatureDomain>> = None;
    let mut layout: Option<FeatureLayout> = None;
    let mut attrs = rest[close + 1..].trim_start();
    while !attrs.is_empty() {
        let eq = attrs
            .find('=')
            .ok_or_else(|| line.err(format!("malformed attribute near `{attrs}`")))?;
        let key = attrs[..eq].trim();
        let after = &attrs[eq + 1..];
        let (value, tail) = if after.starts_with('[') {
            let end = matching(after, 0).ok_or_else(|| line.err(format!("unterminated `[` in {key}")))?;
            (&after[..=end], &after[end + 1..])
        } else {
            let end = after.find(char::is_whitespace).unwrap_or(after.len());
            (&after[..end], &after[end..])
        };
        match key {
            "inputs" => {
                let inner = bracketed(line, value, "inputs")?;
                inputs = Some(
                    split_top(inner)
                        .into_iter()
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect(),
                );
            }
            "domain" => {
                domain = Some(if value == "none" {
                    None
                } else {
                    Some(
                        FeatureDomain::parse(value)
                            .ok_or_else(|| line.err(format!("unknown feature domain `{value}`")))?,
                    )
                });
            }
            "layout" => layout = Some(parse_layout(line, value)?),
            other => return Err(line.err(format!("unknown attribute `{other}`"))),
        }
        attrs = tail.trim_start();
    }

    let layout_given = layout.is_some();
    let kind = match kind_name {
        "Input" => {
            let a = want_args(line, kind_name, &a, 2)?;
            let dims = num_list(line, a[0], "dims")?;
            let batched = match a[1] {
                "batched" => true,
                "unbatched" => false,
                other => return Err(line.err(format!("expected batched|unbatched, found `{other}`"))),
            };
            let domain = domain
                .flatten()
                .ok_or_else(|| line.err("Input nodes need domain=User|Item|Cross"))?;
            NodeKind::Input {
                domain,
                dims,
                batched,
            }
        }
        "Weight" => {
            if a.len() < 3 {
                return Err(line.err("Weight takes rows,cols,seed=<n>[,base=<n>,rows=[..]]"));
            }
            let rows = num(line, a[0], "rows")?;
            let cols = num(line, a[1], "cols")?;
            let mut seed = None;
            let mut base = None;
            let mut sel = None;
            for kv in &a[2..] {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| line.err(format!("expected key=value, found `{kv}`")))?;
                match k.trim() {
                    "seed" => {
                        seed = Some(v.trim().parse::<u64>().map_err(|_| line.err("bad seed"))?)
                    }
                    "base" => base = Some(num(line, v, "base")?),
                    "rows" => sel = Some(row_list(line, v)?),
                    other => return Err(line.err(format!("unknown Weight argument `{other}`"))),
                }
            }
            NodeKind::Weight {
                rows,
                cols,
                init: WeightInit {
                    seed: seed.ok_or_else(|| line.err("Weight needs seed=<n>"))?,
                    base_rows: base.unwrap_or(rows),
                    rows: sel,
                },
            }
        }
        "MatMulMaRI" => {
            let a = want_args(line, kind_name, &a, 3)?;
            NodeKind::MatMulMaRI {
                split: [
                    num(line, a[0], "split")?,
                    num(line, a[1], "split")?,
                    num(line, a[2], "split")?,
                ],
            }
        }
        "Concat" => {
            want_args(line, kind_name, &a, 0)?;
            NodeKind::Concat {
                layout: layout
                    .clone()
                    .unwrap_or_else(|| FeatureLayout::from_pairs(&[(FeatureDomain::Item, 1)]).unwrap()),
            }
        }
        "CrossAttention" => {
            let a = want_args(line, kind_name, &a, 3)?;
            NodeKind::CrossAttention {
                d_q: num(line, a[0], "d_q")?,
                d_kv: num(line, a[1], "d_kv")?,
                d_hidden: num(line, a[2], "d_hidden")?,
            }
        }
        "Reshape" => {
            let a = want_args(line, kind_name, &a, 1)?;
            NodeKind::Reshape {
                dims: num_list(line, a[0], "dims")?,
            }
        }
        "Slice" => {
            let a = want_args(line, kind_name, &a, 2)?;
            NodeKind::Slice {
                start: num(line, a[0], "start")?,
                width: num(line, a[1], "width")?,
            }
        }
        "GatedSum" => {
            let a = want_args(line, kind_name, &a, 1)?;
            NodeKind::GatedSum {
                experts: num(line, a[0], "experts")?,
            }
        }
        "MatMul" => NodeKind::MatMul,
        "Tile" => NodeKind::Tile,
        "Add" => NodeKind::Add,
        "Relu" => NodeKind::Relu,
        "Softmax" => NodeKind::Softmax,
        "Identity" => NodeKind::Identity,
        "Output" => NodeKind::Output,
        other => return Err(line.err(format!("unknown node kind `{other}`"))),
    };
    if !matches!(kind, NodeKind::Input { .. } | NodeKind::Weight { .. } | NodeKind::MatMulMaRI { .. } | NodeKind::CrossAttention { .. } | NodeKind::Reshape { .. } | NodeKind::Slice { .. } | NodeKind::GatedSum { .. } | NodeKind::Concat { .. })
        && !a.is_empty()
    {
        return Err(line.err(format!("{kind_name} takes no arguments")));
    }
    if layout_given && !matches!(kind, NodeKind::Concat { .. }) {
        return Err(line.err("only Concat nodes carry a layout"));
    }
    if !matches!(kind, NodeKind::Input { .. }) && matches!(domain, Some(Some(_))) {
        return Err(line.err("only Input nodes carry a feature domain"));
    }
    Ok(Parsed {
        id: id.to_string(),
        kind,
        inputs: inputs.ok_or_else(|| line.err("missing inputs=[...]"))?,
        layout_given,
        line: line.no,
    })
}

pub fn parse(text: &str) -> Result<Graph> {
    let mut expected: Option<(usize, usize)> = None;
    let mut parsed: Vec<Parsed> = Vec::new();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        last_line = no;
        let body = raw.split('#').next().unwrap().trim();
        if body.is_empty() {
            continue;
        }
        let line = Line { no, text: body };
        if let Some(h) = body.strip_prefix("graph") {
            if !parsed.is_empty() || expected.is_some() {
                return Err(line.err("the `graph` header must come first"));
            }
            let n = h
                .trim()
                .strip_prefix("nodes=")
                .ok_or_else(|| line.err("header must be `graph nodes=<N>`"))?;
            expected = Some((num(&line, n, "node count")?, no));
            continue;
        }
        parsed.push(parse_line(&line)?);
    }
    if let Some((n, _)) = expected {
        if n != parsed.len() {
            return Err(Error::Parse {
                line: last_line.max(1),
                message: format!(
                    "header declares {n} nodes but {} were found (truncated file?)",
                    parsed.len()
                ),
            });
        }
    }
    let names: HashSet<&str> = parsed.iter().map(|p| p.id.as_str()).collect();
    for p in &parsed {
        if let Some(missing) = p.inputs.iter().find(|i| !names.contains(i.as_str())) {
            return Err(Error::Parse {
                line: p.line,
                message: format!("node `{}` references undefined node `{missing}`", p.id),
            });
        }
    }
    let mut b = GraphBuilder::new();
    for p in parsed {
        if matches!(p.kind, NodeKind::Concat { .. }) && !p.layout_given {
            b.concat(&p.id, &p.inputs, None);
        } else {
            b.node(&p.id, p.kind, &p.inputs);
        }
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{fixture_ranking_model, ModelDims};

    #[test]
    fn two_node_round_trip() {
        let mut b = GraphBuilder::new();
        b.input("x", FeatureDomain::Item, &[4], true)
            .node("out", NodeKind::Output, &["x"]);
        let g = b.build().unwrap();
        assert_eq!(parse(&serialize(&g)).unwrap(), g);
    }

    #[test]
    fn fixture_round_trip() {
        let g = fixture_ranking_model(&ModelDims::default()).unwrap();
        let text = serialize(&g);
        let back = parse(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(serialize(&back), text);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let g = fixture_ranking_model(&ModelDims::default()).unwrap();
        let text = serialize(&g);
        // cut at a line boundary and in the middle of a line
        let at_line: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse(&at_line), Err(Error::Parse { .. })));
        let mid = &text[..text.len() / 2];
        assert!(matches!(parse(mid), Err(Error::Parse { .. })));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let src = "# comment\nx = Input([4],batched) inputs=[] domain=Item\ny = Frobnicate() inputs=[x] domain=none\n";
        assert_eq!(
            parse(src).unwrap_err(),
            Error::Parse {
                line: 3,
                message: "unknown node kind `Frobnicate`".into()
            }
        );
        let src = "x = Input([4],batched) inputs=[] domain=Item\no = Output() inputs=[z] domain=none\n";
        assert!(matches!(parse(src), Err(Error::Parse { line: 2, .. })));
        let src = "x = Input([4],batched inputs=[] domain=Item\n";
        assert!(matches!(parse(src), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn hand_written_graph_with_inferred_layout() {
        let src = "\
u = Input([3],unbatched) inputs=[] domain=User
t = Tile() inputs=[u] domain=none
i = Input([2],batched) inputs=[] domain=Item   # item side
c = Concat() inputs=[t, i] domain=none
w = Weight(5,4,seed=1) inputs=[] domain=none
m = MatMul() inputs=[c,w] domain=none
o = Output() inputs=[m] domain=none
";
        let g = parse(src).unwrap();
        let NodeKind::Concat { layout } = &g.by_name("c").unwrap().kind else { panic!() };
        assert_eq!(layout.domain_widths(), [3, 2, 0]);
    }

    #[test]
    fn weight_row_selection_round_trips() {
        let mut b = GraphBuilder::new();
        b.node(
            "w",
            NodeKind::Weight {
                rows: 5,
                cols: 2,
                init: WeightInit {
                    seed: 9,
                    base_rows: 8,
                    rows: Some(vec![0, 1, 2, 6, 4]),
                },
            },
            &[] as &[&str],
        );
        let g = b.build().unwrap();
        let text = serialize(&g);
        assert!(text.contains("rows=[0..3,6,4]"), "{text}");
        assert_eq!(parse(&text).unwrap(), g);
    }
}
