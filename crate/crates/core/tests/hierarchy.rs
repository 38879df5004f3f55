use deepexp::expfam::FamilyParams;
use deepexp::hierarchy::{export, Hierarchy};
use deepexp::model::{DefArchitecture, WeightBlock};
use deepexp::variational::{to_unconstrained, FactorRef, VariationalState};

fn pin(vs: &mut VariationalState, f: FactorRef, mean: f64) {
    let p = FamilyParams::gamma_rate(100.0, 100.0 / mean).unwrap();
    vs.unconstrained_mut(f)
        .unwrap()
        .copy_from_slice(&to_unconstrained(&p).unwrap());
}

/// sparse-gamma-4-2 over 8 items: top unit a feeds bottom units 2a, 2a+1;
/// bottom unit k loads on items 2k, 2k+1.
fn planted() -> (DefArchitecture, VariationalState) {
    let arch = DefArchitecture::named("sparse-gamma-4-2", 8).unwrap();
    let mut vs = VariationalState::init(&arch, 1, 0).unwrap();
    for k in 0..4 {
        for a in 0..2 {
            let w = if k / 2 == a {
                2.0 + k as f64 * 0.1
            } else {
                0.01
            };
            pin(
                &mut vs,
                FactorRef::weight(WeightBlock::Weights(0), k * 2 + a),
                w,
            );
        }
        for i in 0..8 {
            let w = if i / 2 == k {
                1.0 + (i % 2) as f64
            } else {
                0.001
            };
            pin(
                &mut vs,
                FactorRef::weight(WeightBlock::Observation, i * 4 + k),
                w,
            );
        }
    }
    (arch, vs)
}

fn sorted<T: Ord + Clone>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort();
    v
}

#[test]
fn planted_structure_is_recovered() {
    let (arch, vs) = planted();
    let h = export(&arch, &vs, 2, None).unwrap();
    assert_eq!(h.layers.len(), 2);
    assert_eq!(h.layers[0].layer, 2);
    assert_eq!(h.layers[1].layer, 1);
    for (a, u) in h.layers[0].units.iter().enumerate() {
        let kids: Vec<usize> = u.children.iter().map(|c| c.unit).collect();
        assert_eq!(sorted(&kids), vec![2 * a, 2 * a + 1], "top unit {a}");
        assert!(u.children[0].weight >= u.children[1].weight);
        let terms: Vec<usize> = u.terms.iter().map(|t| t.item).collect();
        assert!(terms.iter().all(|&i| i / 4 == a), "top unit {a}: {terms:?}");
    }
    for (k, u) in h.layers[1].units.iter().enumerate() {
        assert!(u.children.is_empty());
        // the heavier item of the pair comes first
        let terms: Vec<usize> = u.terms.iter().map(|t| t.item).collect();
        assert_eq!(terms, vec![2 * k + 1, 2 * k], "bottom unit {k}");
    }
}

#[test]
fn m_is_truncated_to_the_list_size() {
    let (arch, vs) = planted();
    let h = export(&arch, &vs, 100, None).unwrap();
    for u in &h.layers[0].units {
        assert_eq!(u.children.len(), 4);
        assert_eq!(u.terms.len(), 8);
    }
    for u in &h.layers[1].units {
        assert_eq!(u.terms.len(), 8);
    }
    let h0 = export(&arch, &vs, 0, None).unwrap();
    assert!(h0
        .layers
        .iter()
        .flat_map(|l| &l.units)
        .all(|u| u.children.is_empty() && u.terms.is_empty()));
}

#[test]
fn one_layer_model_has_terms_only() {
    let arch = DefArchitecture::named("sparse-gamma-3", 5).unwrap();
    let vs = VariationalState::init(&arch, 1, 2).unwrap();
    let h = export(&arch, &vs, 2, None).unwrap();
    assert_eq!(h.layers.len(), 1);
    for u in &h.layers[0].units {
        assert!(u.children.is_empty());
        assert_eq!(u.terms.len(), 2);
    }
}

#[test]
fn item_names_are_attached() {
    let (arch, vs) = planted();
    let names: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
    let h = export(&arch, &vs, 1, Some(&names)).unwrap();
    let t = &h.layers[1].units[2].terms[0];
    assert_eq!(t.name.as_deref(), Some("w5"));
    let back: Hierarchy = serde_json::from_str(&h.to_json()).unwrap();
    assert_eq!(back, h);
}

#[test]
fn dot_output_parses() {
    let (arch, vs) = planted();
    let names: Vec<String> = [
        "a\"quote",
        "back\\slash",
        "x y",
        "é",
        "5",
        "-",
        "{",
        "end\\",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for h in [
        export(&arch, &vs, 3, None).unwrap(),
        export(&arch, &vs, 3, Some(&names)).unwrap(),
    ] {
        let dot = h.to_dot();
        let g = dot::parse(&dot).unwrap_or_else(|e| panic!("{e}\n{dot}"));
        assert!(g.directed);
        assert_eq!(g.nodes.len(), 6);
        assert_eq!(g.edges.len(), 2 * 3);
        for (from, to) in &g.edges {
            assert!(g.nodes.contains(from) && g.nodes.contains(to));
        }
    }
}

/// Recursive-descent parser for the DOT language (graph, node, edge,
/// attribute and assignment statements; subgraphs and ports rejected).
mod dot {
    use std::collections::HashSet;

    pub struct Graph {
        pub directed: bool,
        pub nodes: HashSet<String>,
        pub edges: Vec<(String, String)>,
    }

    #[derive(Debug, Clone, PartialEq)]
    enum Tok {
        Id(String),
        Punct(char),
        Arrow(&'static str),
    }

    fn lex(s: &str) -> Result<Vec<Tok>, String> {
        let c: Vec<char> = s.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < c.len() {
            let ch = c[i];
            if ch.is_whitespace() {
                i += 1;
            } else if "{}[];,=:".contains(ch) {
                out.push(Tok::Punct(ch));
                i += 1;
            } else if ch == '-' && i + 1 < c.len() && (c[i + 1] == '>' || c[i + 1] == '-') {
                out.push(Tok::Arrow(if c[i + 1] == '>' { "->" } else { "--" }));
                i += 2;
            } else if ch == '"' {
                let mut v = String::new();
                i += 1;
                loop {
                    match c.get(i) {
                        None => return Err("unterminated string".into()),
                        Some('"') => break,
                        Some('\\') => {
                            match c.get(i + 1) {
                                Some('"') => v.push('"'),
                                Some(&x) => {
                                    v.push('\\');
                                    v.push(x);
                                }
                                None => return Err("unterminated string".into()),
                            }
                            i += 2;
                        }
                        Some(&x) => {
                            v.push(x);
                            i += 1;
                        }
                    }
                }
                i += 1;
                out.push(Tok::Id(v));
            } else if ch.is_alphabetic() || ch == '_' {
                let st = i;
                while i < c.len() && (c[i].is_alphanumeric() || c[i] == '_') {
                    i += 1;
                }
                out.push(Tok::Id(c[st..i].iter().collect()));
            } else if ch.is_ascii_digit() || ch == '.' || ch == '-' {
                let st = i;
                i += 1;
                while i < c.len() && (c[i].is_ascii_digit() || c[i] == '.') {
                    i += 1;
                }
                out.push(Tok::Id(c[st..i].iter().collect()));
            } else {
                return Err(format!("unexpected character {ch:?}"));
            }
        }
        Ok(out)
    }

    struct P {
        t: Vec<Tok>,
        i: usize,
    }

    impl P {
        fn peek(&self) -> Option<&Tok> {
            self.t.get(self.i)
        }
        fn punct(&mut self, ch: char) -> bool {
            if self.peek() == Some(&Tok::Punct(ch)) {
                self.i += 1;
                true
            } else {
                false
            }
        }
        fn id(&mut self) -> Result<String, String> {
            match self.t.get(self.i) {
                Some(Tok::Id(s)) => {
                    self.i += 1;
                    Ok(s.clone())
                }
                other => Err(format!("expected ID at token {}, got {other:?}", self.i)),
            }
        }
        fn attr_lists(&mut self) -> Result<(), String> {
            while self.punct('[') {
                while !self.punct(']') {
                    self.id()?;
                    if self.punct('=') {
                        self.id()?;
                    }
                    if !self.punct(';') {
                        self.punct(',');
                    }
                }
            }
            Ok(())
        }
    }

    pub fn parse(s: &str) -> Result<Graph, String> {
        let mut p = P { t: lex(s)?, i: 0 };
        let mut kw = p.id()?.to_lowercase();
        if kw == "strict" {
            kw = p.id()?.to_lowercase();
        }
        let directed = match kw.as_str() {
            "digraph" => true,
            "graph" => false,
            _ => return Err(format!("expected graph or digraph, got {kw}")),
        };
        if matches!(p.peek(), Some(Tok::Id(_))) {
            p.id()?;
        }
        if !p.punct('{') {
            return Err("expected {".into());
        }
        let op = if directed { "->" } else { "--" };
        let mut g = Graph {
            directed,
            nodes: HashSet::new(),
            edges: Vec::new(),
        };
        while !p.punct('}') {
            let first = p.id()?;
            if ["graph", "node", "edge"].contains(&first.to_lowercase().as_str())
                && p.peek() == Some(&Tok::Punct('['))
            {
                p.attr_lists()?;
            } else if p.punct('=') {
                p.id()?;
            } else {
                let mut prev = first;
                g.nodes.insert(prev.clone());
                while let Some(Tok::Arrow(a)) = p.peek() {
                    if *a != op {
                        return Err(format!("edge operator {a} in a {kw}"));
                    }
                    p.i += 1;
                    let next = p.id()?;
                    g.edges.push((prev, next.clone()));
                    prev = next;
                }
                if p.punct(':') {
                    return Err("ports are not expected".into());
                }
                p.attr_lists()?;
            }
            p.punct(';');
        }
        if p.i != p.t.len() {
            return Err("trailing tokens".into());
        }
        Ok(g)
    }
}
