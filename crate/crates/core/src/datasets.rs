//! Relational triples, single-token filtering and the two split regimes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mixture::Query;
use crate::vocab::Vocabulary;
use crate::world::Fact;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub relation: String,
    /// Space-separated entity tokens.
    pub x: String,
    pub y: String,
}

impl From<&Fact> for Triple {
    fn from(f: &Fact) -> Self {
        Triple {
            relation: f.relation.clone(),
            x: f.x.clone(),
            y: f.y.clone(),
        }
    }
}

/// Parses `relation<TAB>x<TAB>y` lines. Blank lines and `#` comments are
/// skipped; duplicates are rejected.
pub fn parse_triples(text: &str) -> Result<Vec<Triple>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format_at(None, line_no, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::format_at(None, line_no, "empty field"));
        }
        let t = Triple {
            relation: fields[0].trim().to_string(),
            x: fields[1].split_whitespace().collect::<Vec<_>>().join(" "),
            y: fields[2].trim().to_string(),
        };
        if !seen.insert(t.clone()) {
            return Err(Error::format_at(None, line_no, format!("duplicate triple {}/{}/{}", t.relation, t.x, t.y)));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn load_triples(path: &Path) -> Result<Vec<Triple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text).map_err(|e| e.with_path(path))
}

pub fn triples_to_tsv(triples: &[Triple]) -> String {
    triples.iter().map(|t| format!("{}\t{}\t{}\n", t.relation, t.x, t.y)).collect()
}

/// Keeps the triples whose `y` is a single vocabulary token.
pub fn filter_single_token_y(triples: &[Triple], vocab: &Vocabulary) -> Vec<Triple> {
    triples
        .iter()
        .filter(|t| {
            let mut toks = t.y.split_whitespace();
            matches!((toks.next(), toks.next()), (Some(w), None) if vocab.id(w).is_some())
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRegime {
    Random,
    DistinctY,
}

impl SplitRegime {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRegime::Random => "random_80_10_10",
            SplitRegime::DistinctY => "distinct_y",
        }
    }
}

impl fmt::Display for SplitRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "random_80_10_10" => Ok(SplitRegime::Random),
            "distinct_y" => Ok(SplitRegime::DistinctY),
            other => Err(Error::input(format!("unknown split regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Dev,
    Test,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Train, Part::Dev, Part::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Dev => "dev",
            Part::Test => "test",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Part {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "dev" => Ok(Part::Dev),
            "test" => Ok(Part::Test),
            other => Err(Error::input(format!("unknown split part {other:?} (train, dev, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Triple>,
    pub dev: Vec<Triple>,
    pub test: Vec<Triple>,
    pub regime: SplitRegime,
    pub seed: u64,
}

impl Split {
    pub fn part(&self, p: Part) -> &[Triple] {
        match p {
            Part::Train => &self.train,
            Part::Dev => &self.dev,
            Part::Test => &self.test,
        }
    }

    fn part_mut(&mut self, p: Part) -> &mut Vec<Triple> {
        match p {
            Part::Train => &mut self.train,
            Part::Dev => &mut self.dev,
            Part::Test => &mut self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.dev.len(), self.test.len())
    }

    /// Restricts every part to one relation.
    pub fn for_relation(&self, relation: &str) -> Split {
        let f = |v: &[Triple]| v.iter().filter(|t| t.relation == relation).cloned().collect();
        Split {
            train: f(&self.train),
            dev: f(&self.dev),
            test: f(&self.test),
            regime: self.regime,
            seed: self.seed,
        }
    }

    /// `part<TAB>relation<TAB>x<TAB>y` rows under a header recording regime,
    /// seed and per-part counts.
    pub fn to_tsv(&self) -> String {
        let (a, b, c) = self.sizes();
        let mut s = format!(
            "# regime={}\n# split_seed={}\n# counts train={a} dev={b} test={c}\n",
            self.regime, self.seed
        );
        for p in Part::ALL {
            for t in self.part(p) {
                s.push_str(&format!("{}\t{}\t{}\t{}\n", p.as_str(), t.relation, t.x, t.y));
            }
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Split> {
        let mut regime = None;
        let mut split = Split {
            train: vec![],
            dev: vec![],
            test: vec![],
            regime: SplitRegime::Random,
            seed: 0,
        };
        let mut counts = None;
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(r) = line.strip_prefix("# regime=") {
                regime = Some(r.trim().parse().map_err(|_| Error::format_at(None, i + 1, format!("bad regime {r:?}")))?);
                continue;
            }
            if let Some(v) = line.strip_prefix("# split_seed=") {
                split.seed = v.trim().parse().map_err(|_| Error::format_at(None, i + 1, format!("bad seed {v:?}")))?;
                continue;
            }
            if let Some(v) = line.strip_prefix("# counts ") {
                let n: Vec<usize> = v
                    .split_whitespace()
                    .filter_map(|kv| kv.split_once('=').and_then(|(_, n)| n.parse().ok()))
                    .collect();
                if n.len() != 3 {
                    return Err(Error::format_at(None, i + 1, "bad counts header"));
                }
                counts = Some((n[0], n[1], n[2]));
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::format_at(None, i + 1, format!("expected 4 tab-separated fields, found {}", f.len())));
            }
            let part: Part = f[0].parse().map_err(|_| Error::format_at(None, i + 1, format!("bad part {:?}", f[0])))?;
            let t = Triple {
                relation: f[1].to_string(),
                x: f[2].to_string(),
                y: f[3].to_string(),
            };
            if !seen.insert((t.relation.clone(), t.x.clone(), t.y.clone())) {
                return Err(Error::format_at(None, i + 1, "triple appears twice in split"));
            }
            split.part_mut(part).push(t);
        }
        split.regime = regime.ok_or_else(|| Error::format("split file lacks a '# regime=' header"))?;
        if let Some(c) = counts {
            if c != split.sizes() {
                return Err(Error::format(format!("header counts {c:?} disagree with rows {:?}", split.sizes())));
            }
        }
        Ok(split)
    }
}

/// Seeded shuffle, then `⌊0.8n⌋ / ⌊0.1n⌋ / remainder`.
pub fn split_random(triples: &[Triple], seed: u64) -> Result<Split> {
    let n = triples.len();
    if n < 10 {
        return Err(Error::input(format!("random split needs at least 10 triples, got {n}")));
    }
    let mut v = triples.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let test = v.split_off(n_train + n_dev);
    let dev = v.split_off(n_train);
    Ok(Split {
        train: v,
        dev,
        test,
        regime: SplitRegime::Random,
        seed,
    })
}

const TARGETS: [f64; 3] = [0.8, 0.1, 0.1];

/// Assigns whole y-groups to parts. Groups are shuffled by seed and stably
/// sorted by size, largest first. The smallest group seeds dev and the next
/// smallest seeds test, so every part is nonempty; the rest go, largest
/// first, to the part furthest below its 80/10/10 share of the total.
pub fn split_distinct_y(triples: &[Triple], seed: u64) -> Result<Split> {
    let mut groups: BTreeMap<&str, Vec<&Triple>> = BTreeMap::new();
    for t in triples {
        groups.entry(t.y.as_str()).or_default().push(t);
    }
    if groups.len() < 3 {
        return Err(Error::input(format!("distinct-y split needs at least 3 distinct y values, got {}", groups.len())));
    }
    let mut groups: Vec<Vec<&Triple>> = groups.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    let assign = assign_groups(&groups.iter().map(|g| g.len()).collect::<Vec<_>>());

    let mut split = Split {
        train: vec![],
        dev: vec![],
        test: vec![],
        regime: SplitRegime::DistinctY,
        seed,
    };
    for (g, bin) in groups.iter().zip(assign) {
        split.part_mut(Part::ALL[bin]).extend(g.iter().map(|t| (*t).clone()));
    }
    // triples keep their input order within a part
    let pos: std::collections::HashMap<&Triple, usize> = triples.iter().enumerate().map(|(i, t)| (t, i)).collect();
    for p in Part::ALL {
        split.part_mut(p).sort_by_key(|t| pos[t]);
    }
    Ok(split)
}

/// Bin index per group for sizes sorted in decreasing order.
fn assign_groups(sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let k = sizes.len();
    let mut fill = [0usize; 3];
    let mut out = vec![0; k];
    out[k - 1] = 1;
    out[k - 2] = 2;
    fill[1] = sizes[k - 1];
    fill[2] = sizes[k - 2];
    for (i, &s) in sizes[..k - 2].iter().enumerate() {
        let deficit = |b: usize| TARGETS[b] * total as f64 - fill[b] as f64;
        let bin = (0..3).fold(0, |best, b| if deficit(b) > deficit(best) { b } else { best });
        out[i] = bin;
        fill[bin] += s;
    }
    out
}

/// Token ids for each triple; every `y` must be a single known token.
pub fn encode_triples(triples: &[Triple], vocab: &Vocabulary) -> Result<Vec<Query>> {
    triples
        .iter()
        .map(|t| {
            let y = vocab
                .id(&t.y)
                .ok_or_else(|| Error::input(format!("answer {:?} is not a single vocabulary token", t.y)))?;
            Ok(Query { x: vocab.encode(&t.x)?, y })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn triples(n: usize, ys: usize) -> Vec<Triple> {
        (0..n)
            .map(|i| Triple {
                relation: "r".into(),
                x: format!("e{i}"),
                y: format!("y{}", i % ys),
            })
            .collect()
    }

    #[test]
    fn parse_in_order_and_errors() {
        let t = parse_triples("r\ta b\tc\n# note\nr\td\te\n\ns\tf\tg\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].x, "a b");
        assert_eq!(t[2].relation, "s");
        let err = parse_triples("r\ta\tb\nr\tonly\n").unwrap_err();
        assert!(matches!(err, Error::Format { line: Some(2), .. }), "{err}");
        assert!(err.to_string().contains(":2") || err.to_string().contains("line 2"));
        let dup = parse_triples("r\ta\tb\nr\ta\tb\n").unwrap_err();
        assert!(matches!(dup, Error::Format { line: Some(2), .. }));
    }

    #[test]
    fn thousand_line_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<Triple> = (0..1000)
            .map(|i| Triple {
                relation: format!("rel{}", rng.random_range(0..5)),
                x: (0..rng.random_range(1..4)).map(|k| format!("t{i}_{k}")).collect::<Vec<_>>().join(" "),
                y: format!("y{}", rng.random_range(0..40)),
            })
            .collect();
        let text = triples_to_tsv(&t);
        let back = parse_triples(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(triples_to_tsv(&back), text);
    }

    #[test]
    fn single_token_filter() {
        let vocab = Vocabulary::new(["1926", "paris", "new", "york"]).unwrap();
        let mk = |y: &str| Triple {
            relation: "r".into(),
            x: "a".into(),
            y: y.into(),
        };
        assert_eq!(filter_single_token_y(&[mk("1926")], &vocab).len(), 1);
        assert!(filter_single_token_y(&[mk("new york")], &vocab).is_empty());
        assert!(filter_single_token_y(&[mk("london")], &vocab).is_empty());

        let words = ["1926", "paris", "new", "york", "london", "new york", "paris new"];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mixed: Vec<Triple> = (0..100)
            .map(|i| Triple {
                relation: "r".into(),
                x: format!("x{i}"),
                y: words[rng.random_range(0..words.len())].into(),
            })
            .collect();
        let oracle: Vec<Triple> = mixed
            .iter()
            .filter(|t| {
                let ids: Vec<Option<usize>> = t.y.split(' ').map(|w| vocab.id(w)).collect();
                ids.len() == 1 && ids[0].is_some()
            })
            .cloned()
            .collect();
        assert_eq!(filter_single_token_y(&mixed, &vocab), oracle);
    }

    #[test]
    fn random_split_sizes() {
        let t = triples(100, 7);
        let s = split_random(&t, 3).unwrap();
        assert_eq!(s.sizes(), (80, 10, 10));
        assert_eq!(s, split_random(&t, 3).unwrap());
        assert_ne!(s, split_random(&t, 4).unwrap());

        let t = triples(97, 7);
        let s = split_random(&t, 5).unwrap();
        assert_eq!(s.sizes(), (77, 9, 11));
        let union: HashSet<&Triple> = s.train.iter().chain(&s.dev).chain(&s.test).collect();
        let input: HashSet<&Triple> = t.iter().collect();
        assert_eq!(union, input);
        assert_eq!(union.len(), 97);

        assert!(matches!(split_random(&triples(9, 3), 0), Err(Error::Input(_))));
    }

    #[test]
    fn three_equal_groups_are_forced_apart() {
        let t = triples(30, 3);
        let s = split_distinct_y(&t, 11).unwrap();
        for p in Part::ALL {
            let ys: HashSet<&str> = s.part(p).iter().map(|t| t.y.as_str()).collect();
            assert_eq!(ys.len(), 1);
        }
        assert!(matches!(split_distinct_y(&triples(30, 2), 0), Err(Error::Input(_))));
    }

    /// Same greedy rule, restated over a sorted list of group sizes.
    fn greedy_train_mass(mut sizes: Vec<usize>) -> usize {
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        let total: usize = sizes.iter().sum();
        let k = sizes.len();
        let mut fill = [0.0, sizes[k - 1] as f64, sizes[k - 2] as f64];
        for &s in &sizes[..k - 2] {
            let gaps = [0.8 * total as f64 - fill[0], 0.1 * total as f64 - fill[1], 0.1 * total as f64 - fill[2]];
            let mut b = 0;
            for j in 1..3 {
                if gaps[j] > gaps[b] {
                    b = j;
                }
            }
            fill[b] += s as f64;
        }
        fill[0] as usize
    }

    #[test]
    fn skewed_masses_land_near_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Vec::new();
        let mut sizes = Vec::new();
        for y in 0..50 {
            // roughly Zipfian group sizes
            let size = 1 + 60 / (y + 1) + rng.random_range(0..3);
            sizes.push(size);
            for k in 0..size {
                t.push(Triple {
                    relation: "r".into(),
                    x: format!("x{y}_{k}"),
                    y: format!("y{y}"),
                });
            }
        }
        let s = split_distinct_y(&t, 4).unwrap();
        let frac = s.train.len() as f64 / t.len() as f64;
        assert!((frac - 0.8).abs() <= 0.05, "train fraction {frac}");
        assert_eq!(s.train.len(), greedy_train_mass(sizes));
        assert_eq!(s.train.len() + s.dev.len() + s.test.len(), t.len());
    }

    #[test]
    fn split_file_round_trip() {
        let t = triples(40, 6);
        for s in [split_random(&t, 1).unwrap(), split_distinct_y(&t, 1).unwrap()] {
            assert_eq!(Split::from_tsv(&s.to_tsv()).unwrap(), s);
        }
        assert!(Split::from_tsv("train\tr\ta\tb\n").is_err());
    }

    fn disjoint_y(s: &Split) -> bool {
        let sets: Vec<HashSet<&str>> = Part::ALL.iter().map(|p| s.part(*p).iter().map(|t| t.y.as_str()).collect()).collect();
        sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2])
    }

    #[test]
    fn fifty_random_datasets_have_disjoint_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for d in 0..50 {
            let n = rng.random_range(20..300);
            let ys = rng.random_range(3..40);
            let t: Vec<Triple> = (0..n)
                .map(|i| Triple {
                    relation: "r".into(),
                    x: format!("x{i}"),
                    y: format!("y{}", rng.random_range(0..ys)),
                })
                .collect();
            if t.iter().map(|x| &x.y).collect::<HashSet<_>>().len() < 3 {
                continue;
            }
            let s = split_distinct_y(&t, d).unwrap();
            assert!(disjoint_y(&s));
            assert!(s.sizes().0 > 0 && s.sizes().1 > 0 && s.sizes().2 > 0);
        }
    }

    proptest! {
        #[test]
        fn splits_partition_input(n in 10usize..200, ys in 3usize..30, seed in 0u64..1000) {
            let t = triples(n, ys.min(n));
            for s in [split_random(&t, seed).unwrap(), split_distinct_y(&t, seed).unwrap()] {
                let all: Vec<&Triple> = s.train.iter().chain(&s.dev).chain(&s.test).collect();
                prop_assert_eq!(all.len(), n);
                let pairs: HashSet<(&str, &str)> = all.iter().map(|t| (t.x.as_str(), t.y.as_str())).collect();
                prop_assert_eq!(pairs.len(), n);
            }
            prop_assert!(disjoint_y(&split_distinct_y(&t, seed).unwrap()));
        }
    }
}
