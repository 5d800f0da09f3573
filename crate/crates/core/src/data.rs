//! Sentence records, constituency trees, per-layer segmentations, the
//! segment supervision signal, dependency relation matrices, and the
//! line-oriented dataset format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

pub const POLARITIES: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

impl Polarity {
    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
            Polarity::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Polarity {
        POLARITIES[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }

    pub fn parse(s: &str) -> Result<Polarity> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            other => Err(Error::invalid(format!("unknown polarity: {other}"))),
        }
    }
}

/// One classification instance: a sentence plus a single aspect span.
/// Sentences with several aspects appear as several records.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceRecord {
    pub tokens: Vec<String>,
    /// Inclusive 0-based aspect span.
    pub aspect_from: usize,
    pub aspect_to: usize,
    pub polarity: Polarity,
    /// 1-based head index per token; 0 marks the syntactic root.
    pub dep_head: Vec<usize>,
    pub dep_label: Vec<String>,
    pub constituency: String,
}

impl SentenceRecord {
    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    pub fn aspect_rows(&self) -> Vec<usize> {
        (self.aspect_from..=self.aspect_to).collect()
    }

    /// Binary aspect indicator per token, as an n x 1 column.
    pub fn aspect_indicator(&self) -> Matrix {
        let mut t = Matrix::zeros(self.n(), 1);
        for i in self.aspect_rows() {
            t.set(i, 0, 1.0);
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::invalid("record has no tokens"));
        }
        if !(self.aspect_from <= self.aspect_to && self.aspect_to < n) {
            return Err(Error::invalid(format!(
                "aspect span [{}, {}] out of range for {n} tokens",
                self.aspect_from, self.aspect_to
            )));
        }
        if self.dep_head.len() != n || self.dep_label.len() != n {
            return Err(Error::invalid("dependency annotations differ in length"));
        }
        if let Some(&h) = self.dep_head.iter().find(|&&h| h > n) {
            return Err(Error::invalid(format!(
                "dependency head {h} out of range for {n} tokens"
            )));
        }
        let roots = self.dep_head.iter().filter(|&&h| h == 0).count();
        if roots != 1 {
            return Err(Error::invalid(format!(
                "expected exactly one root head, found {roots}"
            )));
        }
        let tree = ConstituentTree::parse(&self.constituency)?;
        if tree.n_tokens() != n {
            return Err(Error::invalid(format!(
                "parse yields {} leaves but record has {n} tokens",
                tree.n_tokens()
            )));
        }
        Ok(())
    }
}

/// Arena node of a constituency tree. A node with no children is a leaf
/// covering exactly one token; preterminals like `(NN cat)` collapse into a
/// single leaf labeled `NN`.
#[derive(Clone, Debug)]
pub struct TreeNode {
    pub label: String,
    /// Inclusive token span.
    pub span: (usize, usize),
    pub children: Vec<usize>,
    /// Root has depth 1.
    pub depth: usize,
}

#[derive(Clone, Debug)]
pub struct ConstituentTree {
    nodes: Vec<TreeNode>,
    root: usize,
}

enum PTok {
    Open,
    Close,
    Atom(String),
}

enum Item {
    Child(usize),
    Word(usize, String),
}

impl ConstituentTree {
    pub fn parse(text: &str) -> Result<ConstituentTree> {
        let toks = tokenize_brackets(text);
        if toks.is_empty() {
            return Err(Error::invalid("empty parse string"));
        }
        let mut nodes = Vec::new();
        let mut pos = 0;
        let mut next_token = 0;
        let root = parse_node(&toks, &mut pos, &mut nodes, &mut next_token)?;
        if pos != toks.len() {
            return Err(Error::invalid("trailing content after the root constituent"));
        }
        let mut tree = ConstituentTree { nodes, root };
        tree.assign_depths();
        Ok(tree)
    }

    fn assign_depths(&mut self) {
        let mut stack = vec![(self.root, 1usize)];
        while let Some((id, depth)) = stack.pop() {
            self.nodes[id].depth = depth;
            for &c in &self.nodes[id].children.clone() {
                stack.push((c, depth + 1));
            }
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[self.root]
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn n_tokens(&self) -> usize {
        self.root().span.1 + 1
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Horizontal cut: spans of the nodes sitting at `layer`, with leaves
    /// shallower than `layer` propagated down unchanged.
    pub fn layer_segments(&self, layer: usize) -> Vec<(usize, usize)> {
        assert!(layer >= 1, "layers are 1-based");
        let mut spans = Vec::new();
        self.collect_frontier(self.root, layer, &mut spans);
        spans
    }

    fn collect_frontier(&self, id: usize, layer: usize, out: &mut Vec<(usize, usize)>) {
        let node = &self.nodes[id];
        if node.depth == layer || node.children.is_empty() {
            out.push(node.span);
            return;
        }
        for &c in &node.children {
            self.collect_frontier(c, layer, out);
        }
    }

    /// Root-to-leaf node path for every token, leftmost first.
    fn token_paths(&self) -> Vec<Vec<usize>> {
        let n = self.n_tokens();
        let mut paths = vec![Vec::new(); n];
        let mut stack = vec![(self.root, vec![self.root])];
        while let Some((id, path)) = stack.pop() {
            let node = &self.nodes[id];
            if node.children.is_empty() {
                for t in node.span.0..=node.span.1 {
                    paths[t] = path.clone();
                }
                continue;
            }
            for &c in &node.children {
                let mut p = path.clone();
                p.push(c);
                stack.push((c, p));
            }
        }
        paths
    }
}

fn tokenize_brackets(text: &str) -> Vec<PTok> {
    let mut toks = Vec::new();
    let mut atom = String::new();
    for ch in text.chars() {
        match ch {
            '(' | ')' => {
                if !atom.is_empty() {
                    toks.push(PTok::Atom(std::mem::take(&mut atom)));
                }
                toks.push(if ch == '(' { PTok::Open } else { PTok::Close });
            }
            c if c.is_whitespace() => {
                if !atom.is_empty() {
                    toks.push(PTok::Atom(std::mem::take(&mut atom)));
                }
            }
            c => atom.push(c),
        }
    }
    if !atom.is_empty() {
        toks.push(PTok::Atom(atom));
    }
    toks
}

fn parse_node(
    toks: &[PTok],
    pos: &mut usize,
    nodes: &mut Vec<TreeNode>,
    next_token: &mut usize,
) -> Result<usize> {
    match toks.get(*pos) {
        Some(PTok::Open) => *pos += 1,
        _ => return Err(Error::invalid("expected '(' at constituent start")),
    }
    let label = match toks.get(*pos) {
        Some(PTok::Atom(a)) => {
            *pos += 1;
            a.clone()
        }
        _ => return Err(Error::invalid("expected a constituent label after '('")),
    };
    let mut items = Vec::new();
    loop {
        match toks.get(*pos) {
            Some(PTok::Close) => {
                *pos += 1;
                break;
            }
            Some(PTok::Open) => {
                let child = parse_node(toks, pos, nodes, next_token)?;
                items.push(Item::Child(child));
            }
            Some(PTok::Atom(w)) => {
                items.push(Item::Word(*next_token, w.clone()));
                *next_token += 1;
                *pos += 1;
            }
            None => return Err(Error::invalid("unbalanced parentheses")),
        }
    }
    if items.is_empty() {
        return Err(Error::invalid(format!("constituent {label} has no content")));
    }
    // Preterminal: exactly one word and nothing else collapses to a leaf.
    if items.len() == 1 {
        if let Item::Word(t, _) = items[0] {
            nodes.push(TreeNode {
                label,
                span: (t, t),
                children: Vec::new(),
                depth: 0,
            });
            return Ok(nodes.len() - 1);
        }
    }
    let mut children = Vec::new();
    for item in items {
        match item {
            Item::Child(id) => children.push(id),
            Item::Word(t, w) => {
                nodes.push(TreeNode {
                    label: w,
                    span: (t, t),
                    children: Vec::new(),
                    depth: 0,
                });
                children.push(nodes.len() - 1);
            }
        }
    }
    let span = (
        nodes[children[0]].span.0,
        nodes[*children.last().unwrap()].span.1,
    );
    nodes.push(TreeNode {
        label,
        span,
        children,
        depth: 0,
    });
    Ok(nodes.len() - 1)
}

/// Binary same-segment tensor, one n x n slice per constituent layer.
#[derive(Clone, Debug)]
pub struct SegmentSignal {
    pub layers: Vec<Matrix>,
}

impl SegmentSignal {
    pub fn n(&self) -> usize {
        self.layers.first().map_or(0, |m| m.rows())
    }
}

/// Slice k marks token pairs that share a constituent at layer k+1.
///
/// Computed from per-token root paths (two tokens share a segment iff their
/// paths agree at that depth), independently of `layer_segments`.
pub fn build_segment_signal(tree: &ConstituentTree, layers: usize) -> SegmentSignal {
    assert!(layers >= 1, "need at least one layer");
    let paths = tree.token_paths();
    let n = paths.len();
    let mut out = Vec::with_capacity(layers);
    for layer in 1..=layers {
        let anchor: Vec<usize> = paths
            .iter()
            .map(|p| p[layer.min(p.len()) - 1])
            .collect();
        let mut slice = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if anchor[i] == anchor[j] {
                    slice.set(i, j, 1.0);
                }
            }
        }
        out.push(slice);
    }
    SegmentSignal { layers: out }
}

/// Symmetric matrix of dependency-relation ids; 0 marks "no relation".
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    n: usize,
    ids: Vec<usize>,
}

impl RelationMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.ids[i * self.n + j]
    }

    /// Row-major flattened ids, for table lookup of all n^2 pairs.
    pub fn flat_ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn nonzero_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id != 0).count()
    }
}

/// Both (head, dependent) and (dependent, head) cells carry the label id of
/// the dependent's relation; everything else, including the diagonal, is 0.
pub fn build_relation_matrix(record: &SentenceRecord, vocab: &LabelVocab) -> RelationMatrix {
    let n = record.n();
    let mut ids = vec![0usize; n * n];
    for (i, &head) in record.dep_head.iter().enumerate() {
        if head == 0 {
            continue;
        }
        let j = head - 1;
        if i == j {
            continue;
        }
        let id = vocab.id(&record.dep_label[i]);
        ids[i * n + j] = id;
        ids[j * n + i] = id;
    }
    RelationMatrix { n, ids }
}

/// Token vocabulary; id 0 is the reserved unknown entry.
#[derive(Clone, Debug)]
pub struct TokenVocab {
    words: Vec<String>,
    map: HashMap<String, usize>,
}

pub const UNKNOWN_TOKEN: &str = "<unk>";
/// Reserved label-vocabulary entries: id 0 = no relation, id 1 = unknown.
pub const NO_RELATION_LABEL: &str = "<none>";
pub const UNKNOWN_LABEL: &str = "<unk>";

impl TokenVocab {
    pub fn from_records(records: &[SentenceRecord]) -> TokenVocab {
        let mut v = TokenVocab {
            words: Vec::new(),
            map: HashMap::new(),
        };
        v.push(UNKNOWN_TOKEN.to_string());
        for r in records {
            for t in &r.tokens {
                if !v.map.contains_key(t) {
                    v.push(t.clone());
                }
            }
        }
        v
    }

    fn push(&mut self, w: String) {
        self.map.insert(w.clone(), self.words.len());
        self.words.push(w);
    }

    pub fn id(&self, word: &str) -> usize {
        self.map.get(word).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.words.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TokenVocab> {
        let text = fs::read_to_string(path)?;
        let mut v = TokenVocab {
            words: Vec::new(),
            map: HashMap::new(),
        };
        for line in text.lines() {
            v.push(line.to_string());
        }
        if v.words.is_empty() {
            return Err(Error::invalid("empty vocabulary file"));
        }
        Ok(v)
    }
}

/// Dependency-label vocabulary; id 0 = no relation, id 1 = unknown label.
#[derive(Clone, Debug)]
pub struct LabelVocab {
    labels: Vec<String>,
    map: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn from_records(records: &[SentenceRecord]) -> LabelVocab {
        let mut v = LabelVocab {
            labels: Vec::new(),
            map: HashMap::new(),
        };
        v.push(NO_RELATION_LABEL.to_string());
        v.push(UNKNOWN_LABEL.to_string());
        for r in records {
            for l in &r.dep_label {
                if !v.map.contains_key(l) {
                    v.push(l.clone());
                }
            }
        }
        v
    }

    fn push(&mut self, l: String) {
        self.map.insert(l.clone(), self.labels.len());
        self.labels.push(l);
    }

    /// Id of a label; unseen labels map to the unknown id 1.
    pub fn id(&self, label: &str) -> usize {
        self.map.get(label).copied().unwrap_or(1)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.labels.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LabelVocab> {
        let text = fs::read_to_string(path)?;
        let mut v = LabelVocab {
            labels: Vec::new(),
            map: HashMap::new(),
        };
        for line in text.lines() {
            v.push(line.to_string());
        }
        if v.labels.len() < 2 {
            return Err(Error::invalid(
                "label vocabulary must hold the two reserved entries",
            ));
        }
        Ok(v)
    }
}

/// One record per line, seven tab-separated fields:
/// tokens, aspect_from, aspect_to, polarity, dep_head, dep_label, parse.
pub fn load_dataset(path: &Path) -> Result<Vec<SentenceRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let record = parse_record_line(line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        record
            .validate()
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        records.push(record);
    }
    Ok(records)
}

fn parse_record_line(line: &str) -> Result<SentenceRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(Error::invalid(format!(
            "expected 7 tab-separated fields, found {}",
            fields.len()
        )));
    }
    let tokens: Vec<String> = fields[0].split_whitespace().map(String::from).collect();
    let aspect_from: usize = fields[1]
        .parse()
        .map_err(|_| Error::invalid("aspect_from is not an integer"))?;
    let aspect_to: usize = fields[2]
        .parse()
        .map_err(|_| Error::invalid("aspect_to is not an integer"))?;
    let polarity = Polarity::parse(fields[3])?;
    let dep_head = fields[4]
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad head index: {t}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let dep_label: Vec<String> = fields[5].split_whitespace().map(String::from).collect();
    Ok(SentenceRecord {
        tokens,
        aspect_from,
        aspect_to,
        polarity,
        dep_head,
        dep_label,
        constituency: fields[6].to_string(),
    })
}

pub fn format_record_line(r: &SentenceRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.tokens.join(" "),
        r.aspect_from,
        r.aspect_to,
        r.polarity.as_str(),
        r.dep_head
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(" "),
        r.dep_label.join(" "),
        r.constituency
    )
}

pub fn save_dataset(path: &Path, records: &[SentenceRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format_record_line(r));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
