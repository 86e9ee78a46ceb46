//! Token-id encoding of path-star graphs. Labels keep their numeric ids;
//! four marker tokens sit above the label range: `|` before each edge, `/`
//! before the query, `=` before the response, and the blank `$` that
//! replaces revealed response inputs in teacherless training. `$` is always
//! part of the vocabulary so checkpoints trained under different objectives
//! stay interchangeable.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{assemble_graph, PathStarGraph, Topology};
use crate::error::{Error, Result};

const TOKENS_MAGIC: &[u8; 4] = b"PSTK";
const TOKENS_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_labels: usize,
}

impl Vocab {
    pub fn new(n_labels: usize) -> Self {
        Vocab { n_labels }
    }

    /// Labels plus the four markers.
    pub fn size(&self) -> usize {
        self.n_labels + 4
    }

    pub fn bar(&self) -> u16 {
        self.n_labels as u16
    }

    pub fn slash(&self) -> u16 {
        self.n_labels as u16 + 1
    }

    pub fn eq(&self) -> u16 {
        self.n_labels as u16 + 2
    }

    /// The `$` token fed at response input positions in teacherless runs.
    pub fn blank(&self) -> u16 {
        self.n_labels as u16 + 3
    }

    pub fn is_label(&self, id: u16) -> bool {
        (id as usize) < self.n_labels
    }

    pub fn describe(&self, id: u16) -> String {
        match id {
            x if x == self.bar() => "|".into(),
            x if x == self.slash() => "/".into(),
            x if x == self.eq() => "=".into(),
            x if x == self.blank() => "$".into(),
            x => x.to_string(),
        }
    }
}

/// One tokenized graph: prefix ids (edge list and query) followed by the
/// response. `ids[response_start - 1]` is always the `=` marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u16>,
    pub response_start: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u16>, response_start: usize, vocab: &Vocab) -> Result<Self> {
        if response_start == 0
            || response_start >= ids.len()
            || ids[response_start - 1] != vocab.eq()
        {
            return Err(Error::MalformedSequence(format!(
                "response_start {response_start} does not sit right after '=' \
                 in a {}-token sequence",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab.size()) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                size: vocab.size(),
            });
        }
        Ok(TokenSequence {
            ids,
            response_start,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Response length in tokens.
    pub fn l_resp(&self) -> usize {
        self.ids.len() - self.response_start
    }

    pub fn prefix(&self) -> &[u16] {
        &self.ids[..self.response_start]
    }

    pub fn response(&self) -> &[u16] {
        &self.ids[self.response_start..]
    }
}

/// Lays out `| v v'` per edge, `/ start goal =`, then the path. The prefix
/// is everything through `=`; its length is `3 * edges + 4`.
pub fn encode(g: &PathStarGraph, vocab: &Vocab) -> Result<TokenSequence> {
    let topo = &g.topology;
    if topo.n_labels > vocab.n_labels {
        return Err(Error::LabelOutOfRange {
            label: topo.n_labels as u16,
            n_labels: vocab.n_labels,
        });
    }
    let prefix_len = 3 * topo.n_edges() + 4;
    let mut ids = Vec::with_capacity(prefix_len + topo.l);
    for &(v, v2) in &g.edges {
        check_label(v, vocab)?;
        check_label(v2, vocab)?;
        ids.push(vocab.bar());
        ids.push(v);
        ids.push(v2);
    }
    ids.push(vocab.slash());
    ids.push(g.center);
    ids.push(g.goal());
    ids.push(vocab.eq());
    debug_assert_eq!(ids.len(), prefix_len);
    for &n in &g.oracle_path() {
        check_label(n, vocab)?;
        ids.push(n);
    }
    TokenSequence::new(ids, prefix_len, vocab)
}

fn check_label(label: u16, vocab: &Vocab) -> Result<()> {
    if (label as usize) < vocab.n_labels {
        Ok(())
    } else {
        Err(Error::LabelOutOfRange {
            label,
            n_labels: vocab.n_labels,
        })
    }
}

/// Inverse of `encode`: walks the id layout, then rebuilds and fully
/// validates the graph. Errors name the first offending token position.
pub fn decode(seq: &TokenSequence, vocab: &Vocab) -> Result<PathStarGraph> {
    let ids = &seq.ids;
    let bad = |pos: usize, what: &str| {
        Error::MalformedSequence(format!("position {pos}: expected {what}"))
    };

    let mut i = 0;
    let mut edges = Vec::new();
    while i < ids.len() && ids[i] == vocab.bar() {
        let (v, v2) = match (ids.get(i + 1), ids.get(i + 2)) {
            (Some(&v), Some(&v2)) if vocab.is_label(v) && vocab.is_label(v2) => (v, v2),
            _ => return Err(bad(i + 1, "two node labels after '|'")),
        };
        edges.push((v, v2));
        i += 3;
    }
    if ids.get(i) != Some(&vocab.slash()) {
        return Err(bad(i, "'/' after the edge list"));
    }
    let (start, goal) = match (ids.get(i + 1), ids.get(i + 2)) {
        (Some(&s), Some(&g)) if vocab.is_label(s) && vocab.is_label(g) => (s, g),
        _ => return Err(bad(i + 1, "start and goal labels after '/'")),
    };
    i += 3;
    if ids.get(i) != Some(&vocab.eq()) {
        return Err(bad(i, "'=' after the query"));
    }
    i += 1;
    if i != seq.response_start {
        return Err(bad(i, "the response to start here"));
    }

    let mut path = Vec::with_capacity(ids.len() - i);
    for (j, &id) in ids[i..].iter().enumerate() {
        if !vocab.is_label(id) {
            return Err(bad(i + j, "a node label in the response"));
        }
        path.push(id);
    }

    let l = path.len();
    if l < 2 || edges.len() % (l - 1) != 0 {
        return Err(Error::MalformedSequence(format!(
            "{} edges cannot form equal arms for a {l}-node path",
            edges.len()
        )));
    }
    let topology = Topology::new(edges.len() / (l - 1), l, vocab.n_labels)?;
    assemble_graph(&topology, edges, start, goal, &path)
}

/// The response segment reversed in place; prefix and boundary untouched.
pub fn reverse_response(seq: &TokenSequence) -> TokenSequence {
    let mut out = seq.clone();
    out.ids[seq.response_start..].reverse();
    out
}

/// Input ids for teacherless training: every response position carries `$`.
/// Targets stay on the original sequence.
pub fn teacherless_inputs(seq: &TokenSequence, vocab: &Vocab) -> Vec<u16> {
    let mut ids = seq.ids.clone();
    for id in ids[seq.response_start..].iter_mut() {
        *id = vocab.blank();
    }
    ids
}

// ── compact binary form ─────────────────────────────────────────────────

/// Fast-reload cache of tokenized sequences; the text dataset stays
/// canonical. Layout: magic, version, vocab size, record count, then per
/// record its length, response_start, and little-endian u16 ids.
pub fn write_tokens(path: &Path, seqs: &[TokenSequence], vocab: &Vocab) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(TOKENS_MAGIC)?;
    f.write_all(&[TOKENS_VERSION])?;
    f.write_all(&(vocab.size() as u32).to_le_bytes())?;
    f.write_all(&(seqs.len() as u32).to_le_bytes())?;
    for seq in seqs {
        f.write_all(&(seq.ids.len() as u32).to_le_bytes())?;
        f.write_all(&(seq.response_start as u32).to_le_bytes())?;
        for &id in &seq.ids {
            f.write_all(&id.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_tokens(path: &Path, vocab: &Vocab) -> Result<Vec<TokenSequence>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut f, &mut magic, "magic")?;
    if &magic != TOKENS_MAGIC {
        return Err(Error::Integrity("not a token cache file".into()));
    }
    let mut ver = [0u8; 1];
    read_exact(&mut f, &mut ver, "version")?;
    if ver[0] != TOKENS_VERSION {
        return Err(Error::Integrity(format!(
            "token cache version {} unsupported",
            ver[0]
        )));
    }
    let v = read_u32(&mut f, "vocab size")? as usize;
    if v != vocab.size() {
        return Err(Error::Integrity(format!(
            "token cache was built for vocab {v}, expected {}",
            vocab.size()
        )));
    }
    let n = read_u32(&mut f, "record count")? as usize;
    let mut seqs = Vec::with_capacity(n);
    for r in 0..n {
        let len = read_u32(&mut f, "record length")? as usize;
        let rs = read_u32(&mut f, "response start")? as usize;
        let mut buf = vec![0u8; len * 2];
        read_exact(&mut f, &mut buf, "record ids")?;
        let ids: Vec<u16> = buf
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let seq = TokenSequence::new(ids, rs, vocab)
            .map_err(|e| Error::Integrity(format!("record {r}: {e}")))?;
        seqs.push(seq);
    }
    Ok(seqs)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Integrity(format!("token cache truncated reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
