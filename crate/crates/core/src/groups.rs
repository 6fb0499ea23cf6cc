//! Finite-group algebra and state-tracking task generation.
//!
//! A task instance is a token sequence x_1..x_T over a finite group G; the
//! target at step t is the running product g_t = g_{t-1} · x_t with g_0 = e.
//! Products use the convention table[a][b] = a∘b with b applied first as a
//! function on points, so that composing (12) then (23) in S3 yields (123).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};

/// Square multiplication table with entries in [0, n).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CayleyTable {
    order: usize,
    entries: Vec<usize>,
}

impl CayleyTable {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let order = rows.len();
        let mut entries = Vec::with_capacity(order * order);
        for row in &rows {
            if row.len() != order {
                return Err(Error::config("Cayley table is not square"));
            }
            entries.extend_from_slice(row);
        }
        Ok(CayleyTable { order, entries })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> usize {
        self.entries[a * self.order + b]
    }
}

/// A finite group with a distinguished generating set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub order: usize,
    pub table: CayleyTable,
    pub identity: usize,
    pub generators: Vec<usize>,
    /// Printable element names in table order (e.g. "(12)" for S3, "3" for C6).
    pub element_names: Vec<String>,
}

/// Token sequence x_1..x_T of element indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Exact symbolic trajectory g_1..g_T for a token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryLabels(pub Vec<usize>);

/// How tokens are drawn when sampling task batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSampling {
    /// i.i.d. uniform over all of G (the main-experiment protocol).
    UniformAll,
    /// i.i.d. uniform over the generator set only.
    Generators,
}

// ── permutation helpers ─────────────────────────────────────────────

/// Compose one-line permutations: (a ∘ b)(p) = a[b[p]], i.e. b acts first.
fn compose(a: &[usize], b: &[usize]) -> Vec<usize> {
    b.iter().map(|&p| a[p]).collect()
}

fn table_from_perms(perms: &[Vec<usize>]) -> Result<CayleyTable> {
    let mut rows = Vec::with_capacity(perms.len());
    for a in perms {
        let mut row = Vec::with_capacity(perms.len());
        for b in perms {
            let prod = compose(a, b);
            let idx = perms
                .iter()
                .position(|p| *p == prod)
                .ok_or_else(|| Error::config("permutation set is not closed"))?;
            row.push(idx);
        }
        rows.push(row);
    }
    CayleyTable::from_rows(rows)
}

fn perm_parity(perm: &[usize]) -> usize {
    let mut seen = vec![false; perm.len()];
    let mut parity = 0;
    for start in 0..perm.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut p = start;
        while !seen[p] {
            seen[p] = true;
            p = perm[p];
            len += 1;
        }
        parity ^= (len + 1) % 2;
    }
    parity
}

fn all_perms(n: usize) -> Vec<Vec<usize>> {
    // Lexicographic order of one-line notation; identity comes first.
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next_permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
    out
}

// ── group construction ──────────────────────────────────────────────

const MAX_GROUP_ORDER: usize = 12;

fn cyclic(k: usize) -> Result<GroupSpec> {
    if k < 2 || k > MAX_GROUP_ORDER {
        return Err(Error::config(format!(
            "cyclic order {k} outside supported range 2..={MAX_GROUP_ORDER}"
        )));
    }
    let rows = (0..k).map(|a| (0..k).map(|b| (a + b) % k).collect()).collect();
    Ok(GroupSpec {
        name: format!("C{k}"),
        order: k,
        table: CayleyTable::from_rows(rows)?,
        identity: 0,
        generators: vec![1],
        element_names: (0..k).map(|e| e.to_string()).collect(),
    })
}

fn symmetric3() -> Result<GroupSpec> {
    // Element order fixed to {e,(12),(13),(23),(123),(132)}; 0-based one-line
    // notation on points {0,1,2}.
    let perms: Vec<Vec<usize>> = vec![
        vec![0, 1, 2], // e
        vec![1, 0, 2], // (12)
        vec![2, 1, 0], // (13)
        vec![0, 2, 1], // (23)
        vec![1, 2, 0], // (123)
        vec![2, 0, 1], // (132)
    ];
    let names = ["e", "(12)", "(13)", "(23)", "(123)", "(132)"];
    Ok(GroupSpec {
        name: "S3".into(),
        order: 6,
        table: table_from_perms(&perms)?,
        identity: 0,
        // Generators (12) and (23), as in the running-product examples.
        generators: vec![1, 3],
        element_names: names.iter().map(|s| s.to_string()).collect(),
    })
}

fn alternating4() -> Result<GroupSpec> {
    let perms: Vec<Vec<usize>> = all_perms(4)
        .into_iter()
        .filter(|p| perm_parity(p) == 0)
        .collect();
    let names: Vec<String> = perms
        .iter()
        .map(|p| format!("[{}]", p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("")))
        .collect();
    // Standard generators: the 3-cycle (012) and the double transposition (01)(23).
    let r = vec![1, 2, 0, 3];
    let v = vec![1, 0, 3, 2];
    let generators = vec![
        perms.iter().position(|p| *p == r).unwrap(),
        perms.iter().position(|p| *p == v).unwrap(),
    ];
    Ok(GroupSpec {
        name: "A4".into(),
        order: 12,
        table: table_from_perms(&perms)?,
        identity: 0,
        generators,
        element_names: names,
    })
}

fn direct_product(left: &GroupSpec, right: &GroupSpec, name: &str) -> Result<GroupSpec> {
    let (nl, nr) = (left.order, right.order);
    let order = nl * nr;
    if order > MAX_GROUP_ORDER {
        return Err(Error::config(format!("direct product order {order} exceeds {MAX_GROUP_ORDER}")));
    }
    // Lexicographic pairing: (a, b) ↦ a·|right| + b.
    let idx = |a: usize, b: usize| a * nr + b;
    let mut rows = vec![vec![0usize; order]; order];
    for a1 in 0..nl {
        for b1 in 0..nr {
            for a2 in 0..nl {
                for b2 in 0..nr {
                    rows[idx(a1, b1)][idx(a2, b2)] =
                        idx(left.table.get(a1, a2), right.table.get(b1, b2));
                }
            }
        }
    }
    let mut element_names = Vec::with_capacity(order);
    for a in 0..nl {
        for b in 0..nr {
            element_names.push(format!("({},{})", left.element_names[a], right.element_names[b]));
        }
    }
    Ok(GroupSpec {
        name: name.into(),
        order,
        table: CayleyTable::from_rows(rows)?,
        identity: idx(left.identity, right.identity),
        generators: vec![idx(1, 0), idx(0, 1)],
        element_names,
    })
}

/// Build a named group. Supported: `C2`, `C3`, `C6`, `Ck` for 2 ≤ k ≤ 12,
/// `S3`, `C2xC4`, `A4`.
pub fn build_group(name: &str) -> Result<GroupSpec> {
    let spec = match name {
        "S3" => symmetric3()?,
        "A4" => alternating4()?,
        "C2xC4" => direct_product(&cyclic(2)?, &cyclic(4)?, "C2xC4")?,
        _ => {
            let k = name
                .strip_prefix('C')
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| Error::config(format!("unknown group name '{name}'")))?;
            cyclic(k)?
        }
    };
    spec.validate()?;
    Ok(spec)
}

impl GroupSpec {
    /// Product a·b from the table.
    #[inline]
    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.table.get(a, b)
    }

    pub fn inverse(&self, a: usize) -> usize {
        (0..self.order)
            .find(|&b| self.mul(a, b) == self.identity)
            .expect("validated group has inverses")
    }

    /// Exhaustive group-axiom check: Latin square, associativity, identity,
    /// inverses, and closure of the generator set. Cheap for |G| ≤ 12.
    pub fn validate(&self) -> Result<()> {
        let n = self.order;
        if self.table.order() != n {
            return Err(Error::config("table order does not match group order"));
        }
        if self.identity >= n {
            return Err(Error::config("identity index out of range"));
        }
        // Latin square: each row and column is a permutation of 0..n.
        for a in 0..n {
            let mut row_seen = vec![false; n];
            let mut col_seen = vec![false; n];
            for b in 0..n {
                let r = self.mul(a, b);
                let c = self.mul(b, a);
                if r >= n || c >= n || row_seen[r] || col_seen[c] {
                    return Err(Error::config(format!("table is not a Latin square at row {a}")));
                }
                row_seen[r] = true;
                col_seen[c] = true;
            }
        }
        // Identity row/column act as identity maps.
        for a in 0..n {
            if self.mul(self.identity, a) != a || self.mul(a, self.identity) != a {
                return Err(Error::config("identity element does not act trivially"));
            }
        }
        // Associativity over all triples.
        for a in 0..n {
            for b in 0..n {
                let ab = self.mul(a, b);
                for c in 0..n {
                    if self.mul(ab, c) != self.mul(a, self.mul(b, c)) {
                        return Err(Error::config(format!(
                            "associativity fails at ({a},{b},{c})"
                        )));
                    }
                }
            }
        }
        // Inverses.
        for a in 0..n {
            if !(0..n).any(|b| self.mul(a, b) == self.identity && self.mul(b, a) == self.identity) {
                return Err(Error::config(format!("element {a} has no inverse")));
            }
        }
        // Generator closure equals the whole group.
        if self.generators.is_empty() || self.generators.iter().any(|&g| g >= n) {
            return Err(Error::config("invalid generator set"));
        }
        let mut reached = vec![false; n];
        reached[self.identity] = true;
        let mut frontier = vec![self.identity];
        while let Some(a) = frontier.pop() {
            for &g in &self.generators {
                let b = self.mul(a, g);
                if !reached[b] {
                    reached[b] = true;
                    frontier.push(b);
                }
            }
        }
        if reached.iter().any(|r| !r) {
            return Err(Error::config("generators do not generate the group"));
        }
        Ok(())
    }
}

// ── task generation ─────────────────────────────────────────────────

/// Running product g_t = g_{t-1} · x_t starting from g0.
pub fn running_product(group: &GroupSpec, seq: &TokenSequence, g0: usize) -> TrajectoryLabels {
    let mut state = g0;
    let labels = seq
        .0
        .iter()
        .map(|&x| {
            state = group.mul(state, x);
            state
        })
        .collect();
    TrajectoryLabels(labels)
}

/// Sample `n` i.i.d. sequences of length `t` with exact labels; deterministic
/// in `seed`. Labels start from the identity.
pub fn sample_batch(
    group: &GroupSpec,
    n: usize,
    t: usize,
    seed: u64,
    sampling: TokenSampling,
) -> Vec<(TokenSequence, TrajectoryLabels)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = match sampling {
        TokenSampling::UniformAll => (0..group.order).collect(),
        TokenSampling::Generators => group.generators.clone(),
    };
    (0..n)
        .map(|_| {
            let tokens: Vec<usize> =
                (0..t).map(|_| pool[rng.random_range(0..pool.len())]).collect();
            let seq = TokenSequence(tokens);
            let labels = running_product(group, &seq, group.identity);
            (seq, labels)
        })
        .collect()
}

/// All words over G of length 1..=max_len whose product is the identity
/// (equivalently, whose symbolic action fixes every state).
pub fn enumerate_return_words(group: &GroupSpec, max_len: usize) -> Result<Vec<TokenSequence>> {
    if max_len > 8 {
        return Err(Error::resource(format!("return-word length {max_len} exceeds guard 8")));
    }
    let mut total: u64 = 0;
    let mut pow: u64 = 1;
    for _ in 0..max_len {
        pow = pow.saturating_mul(group.order as u64);
        total = total.saturating_add(pow);
    }
    if total > 20_000_000 {
        return Err(Error::resource(format!(
            "return-word enumeration over {total} candidate words is too large"
        )));
    }
    let mut words = Vec::new();
    let mut current = Vec::new();
    fn recurse(
        group: &GroupSpec,
        max_len: usize,
        product: usize,
        current: &mut Vec<usize>,
        words: &mut Vec<TokenSequence>,
    ) {
        if !current.is_empty() && product == group.identity {
            words.push(TokenSequence(current.clone()));
        }
        if current.len() == max_len {
            return;
        }
        for x in 0..group.order {
            current.push(x);
            recurse(group, max_len, group.mul(product, x), current, words);
            current.pop();
        }
    }
    recurse(group, max_len, group.identity, &mut current, &mut words);
    Ok(words)
}

/// Dump a batch as CSV rows `(seq, t, token, label)` for inspection.
pub fn write_batch_csv<W: Write>(
    out: &mut W,
    group: &GroupSpec,
    batch: &[(TokenSequence, TrajectoryLabels)],
) -> Result<()> {
    writeln!(out, "seq,t,token,label,token_name,label_name")?;
    for (i, (seq, labels)) in batch.iter().enumerate() {
        for (t, (&x, &g)) in seq.0.iter().zip(labels.0.iter()).enumerate() {
            writeln!(
                out,
                "{i},{},{x},{g},{},{}",
                t + 1,
                group.element_names[x],
                group.element_names[g]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s3_index(name: &str) -> usize {
        build_group("S3")
            .unwrap()
            .element_names
            .iter()
            .position(|n| n == name)
            .unwrap()
    }

    #[test]
    fn all_supported_groups_validate() {
        for name in ["C2", "C3", "C4", "C6", "S3", "C2xC4", "A4"] {
            let g = build_group(name).unwrap();
            g.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_group_is_config_error() {
        assert!(matches!(build_group("Q8"), Err(Error::Config(_))));
        assert!(matches!(build_group("C99"), Err(Error::Config(_))));
    }

    #[test]
    fn s3_products_match_worked_examples() {
        let g = build_group("S3").unwrap();
        let (e12, e13, e23, e123, e132) =
            (s3_index("(12)"), s3_index("(13)"), s3_index("(23)"), s3_index("(123)"), s3_index("(132)"));
        // (12)·(23) = (123), then ·(12) = (13).
        assert_eq!(g.mul(e12, e23), e123);
        assert_eq!(g.mul(e123, e12), e13);
        // Reversed order: (23)·(12) = (132) — S3 is non-Abelian.
        assert_eq!(g.mul(e23, e12), e132);
        assert_ne!(g.mul(e12, e23), g.mul(e23, e12));
    }

    #[test]
    fn c2_c3_tables() {
        let c2 = build_group("C2").unwrap();
        assert_eq!(c2.mul(1, 1), 0);
        let c3 = build_group("C3").unwrap();
        assert_eq!(c3.mul(1, 2), 0);
    }

    #[test]
    fn s3_running_product_example() {
        let g = build_group("S3").unwrap();
        let seq = TokenSequence(vec![s3_index("(12)"), s3_index("(23)"), s3_index("(12)")]);
        let labels = running_product(&g, &seq, g.identity);
        assert_eq!(labels.0, vec![s3_index("(12)"), s3_index("(123)"), s3_index("(13)")]);
    }

    #[test]
    fn c2_running_product_example() {
        let g = build_group("C2").unwrap();
        let labels = running_product(&g, &TokenSequence(vec![1, 1, 0]), 0);
        assert_eq!(labels.0, vec![1, 0, 0]);
    }

    #[test]
    fn identity_tokens_hold_state() {
        let g = build_group("A4").unwrap();
        for g0 in 0..g.order {
            let labels = running_product(&g, &TokenSequence(vec![g.identity; 5]), g0);
            assert!(labels.0.iter().all(|&s| s == g0));
        }
    }

    #[test]
    fn sample_batch_is_deterministic_and_labels_are_exact() {
        let g = build_group("S3").unwrap();
        let a = sample_batch(&g, 64, 7, 1234, TokenSampling::UniformAll);
        let b = sample_batch(&g, 64, 7, 1234, TokenSampling::UniformAll);
        assert_eq!(a, b);
        for (seq, labels) in &a {
            assert_eq!(running_product(&g, seq, g.identity), *labels);
        }
        let c = sample_batch(&g, 64, 7, 1235, TokenSampling::UniformAll);
        assert_ne!(a, c);
    }

    #[test]
    fn generator_sampling_stays_in_generator_set() {
        let g = build_group("S3").unwrap();
        for (seq, _) in sample_batch(&g, 32, 9, 7, TokenSampling::Generators) {
            assert!(seq.0.iter().all(|x| g.generators.contains(x)));
        }
    }

    #[test]
    fn token_frequencies_are_uniform_within_3_sigma() {
        // Fixed-seed draw; binomial 3σ bound per element.
        let g = build_group("S3").unwrap();
        let n = 10_000;
        let t = 2;
        let batch = sample_batch(&g, n, t, 42, TokenSampling::UniformAll);
        let mut counts = vec![0usize; g.order];
        for (seq, _) in &batch {
            for &x in &seq.0 {
                counts[x] += 1;
            }
        }
        let total = (n * t) as f64;
        let p = 1.0 / g.order as f64;
        let sigma = (total * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - total * p).abs() <= 3.0 * sigma, "counts {counts:?}");
        }
    }

    #[test]
    fn c2_t1_labels_equal_tokens() {
        let g = build_group("C2").unwrap();
        for (seq, labels) in sample_batch(&g, 50, 1, 3, TokenSampling::UniformAll) {
            assert_eq!(seq.0, labels.0);
        }
    }

    #[test]
    fn c2_return_words_up_to_len_2() {
        let g = build_group("C2").unwrap();
        let words = enumerate_return_words(&g, 2).unwrap();
        let set: Vec<Vec<usize>> = words.into_iter().map(|w| w.0).collect();
        assert_eq!(set, vec![vec![0], vec![0, 0], vec![1, 1]]);
    }

    #[test]
    fn s3_return_words_of_len_2_are_inverse_pairs() {
        let g = build_group("S3").unwrap();
        let words = enumerate_return_words(&g, 2).unwrap();
        for w in words.iter().filter(|w| w.len() == 2) {
            assert_eq!(w.0[1], g.inverse(w.0[0]));
        }
        // e, (e,e), and one inverse pair per element.
        assert_eq!(words.len(), 1 + g.order);
    }

    #[test]
    fn c3_return_word_count_matches_brute_force() {
        let g = build_group("C3").unwrap();
        let words = enumerate_return_words(&g, 3).unwrap();
        // Independent oracle: count words over {0,1,2} of length ≤ 3 whose sum ≡ 0 mod 3.
        let mut expected = 0;
        for len in 1..=3usize {
            for mut code in 0..3usize.pow(len as u32) {
                let mut sum = 0;
                for _ in 0..len {
                    sum += code % 3;
                    code /= 3;
                }
                if sum % 3 == 0 {
                    expected += 1;
                }
            }
        }
        assert_eq!(words.len(), expected);
    }

    #[test]
    fn return_word_guard_rejects_large_enumerations() {
        let g = build_group("A4").unwrap();
        assert!(matches!(enumerate_return_words(&g, 9), Err(Error::Resource(_))));
        assert!(matches!(enumerate_return_words(&g, 8), Err(Error::Resource(_))));
    }

    #[test]
    fn batch_csv_has_one_row_per_token() {
        let g = build_group("C2").unwrap();
        let batch = sample_batch(&g, 3, 4, 0, TokenSampling::UniformAll);
        let mut buf = Vec::new();
        write_batch_csv(&mut buf, &g, &batch).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 4);
    }

    proptest! {
        #[test]
        fn concatenation_extends_prefix_labels(
            seed in 0u64..1000,
            split in 1usize..6,
            extra in 1usize..6,
        ) {
            let g = build_group("S3").unwrap();
            let batch = sample_batch(&g, 1, split + extra, seed, TokenSampling::UniformAll);
            let (seq, labels) = &batch[0];
            let prefix = TokenSequence(seq.0[..split].to_vec());
            let prefix_labels = running_product(&g, &prefix, g.identity);
            prop_assert_eq!(&labels.0[..split], &prefix_labels.0[..]);
        }

        #[test]
        fn return_words_fix_every_start_state(word_idx in 0usize..100, g0 in 0usize..6) {
            let g = build_group("S3").unwrap();
            let words = enumerate_return_words(&g, 3).unwrap();
            let w = &words[word_idx % words.len()];
            let labels = running_product(&g, w, g0);
            prop_assert_eq!(*labels.0.last().unwrap(), g0);
        }
    }
}
