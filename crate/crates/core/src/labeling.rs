//! Thread patterns and the self-supervised labels derived from author
//! sequences.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, Turn, UserId};
use crate::{Error, Result};

/// Canonical author-sequence encoding: the i-th distinct author (by first
/// appearance) becomes the i-th symbol `A`, `B`, ... `Z`. Past 26 users the
/// alphabet wraps with a numeric suffix: `A1` .. `Z1`, `A2`, ...
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThreadPattern(String);

fn symbol(i: usize) -> String {
    let letter = char::from(b'A' + (i % 26) as u8);
    match i / 26 {
        0 => letter.to_string(),
        round => format!("{letter}{round}"),
    }
}

impl ThreadPattern {
    pub fn from_authors<'a, I>(authors: I) -> Self
    where
        I: IntoIterator<Item = &'a UserId>,
    {
        let mut seen: HashMap<&UserId, usize> = HashMap::new();
        let mut out = String::new();
        for a in authors {
            let next = seen.len();
            let idx = *seen.entry(a).or_insert(next);
            out.push_str(&symbol(idx));
        }
        ThreadPattern(out)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Symbol indices, one per turn.
    pub fn symbols(&self) -> Vec<usize> {
        parse_symbols(&self.0).expect("ThreadPattern is always well formed")
    }

    /// Number of turns.
    pub fn len(&self) -> usize {
        self.symbols().len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.symbols().into_iter().max().map_or(0, |m| m + 1)
    }
}

fn parse_symbols(s: &str) -> Result<Vec<usize>> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if !c.is_ascii_uppercase() {
            return Err(Error::InvalidInput(format!(
                "bad thread pattern {s:?}: expected A-Z at byte {i}"
            )));
        }
        i += 1;
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let round: usize = if start == i {
            0
        } else {
            let r: usize = s[start..i]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad thread pattern {s:?}")))?;
            if r == 0 {
                return Err(Error::InvalidInput(format!(
                    "bad thread pattern {s:?}: zero suffix"
                )));
            }
            r
        };
        out.push(round * 26 + usize::from(c - b'A'));
    }
    Ok(out)
}

impl FromStr for ThreadPattern {
    type Err = Error;

    /// Accepts only canonical patterns (`"ABA"`, not `"BAB"`).
    fn from_str(s: &str) -> Result<Self> {
        let symbols = parse_symbols(s)?;
        if symbols.is_empty() {
            return Err(Error::InvalidInput("empty thread pattern".into()));
        }
        let mut next = 0;
        for &sym in &symbols {
            if sym > next {
                return Err(Error::InvalidInput(format!(
                    "thread pattern {s:?} is not canonical"
                )));
            }
            if sym == next {
                next += 1;
            }
        }
        Ok(ThreadPattern(s.to_string()))
    }
}

impl fmt::Display for ThreadPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn thread_pattern(context: &[Turn]) -> Result<ThreadPattern> {
    if context.is_empty() {
        return Err(Error::Precondition(
            "thread pattern of empty context".into(),
        ));
    }
    Ok(ThreadPattern::from_authors(
        context.iter().map(|t| &t.author),
    ))
}

/// Spread pattern: focused (at most two distinct authors) is `true`.
pub fn sp_label(context: &[Turn]) -> bool {
    let authors: HashSet<&UserId> = context.iter().map(|t| &t.author).collect();
    authors.len() <= 2
}

fn check_target(context: &[Turn], target: &UserId) -> Result<()> {
    match context.last() {
        Some(t) if &t.author == target => Ok(()),
        Some(t) => Err(Error::Precondition(format!(
            "last turn authored by {}, not target {}",
            t.author, target
        ))),
        None => Err(Error::Precondition("empty context".into())),
    }
}

/// Repeated target: the target also authored an earlier turn.
pub fn rt_label(context: &[Turn], target: &UserId) -> Result<bool> {
    check_target(context, target)?;
    Ok(context[..context.len() - 1]
        .iter()
        .any(|t| &t.author == target))
}

/// Turn authorship of every turn but the last.
pub fn ta_labels(context: &[Turn], target: &UserId) -> Result<Vec<bool>> {
    check_target(context, target)?;
    if context.len() < 2 {
        return Err(Error::Precondition(
            "turn authorship needs at least two turns".into(),
        ));
    }
    Ok(context[..context.len() - 1]
        .iter()
        .map(|t| &t.author == target)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sp,
    Rt,
    Ta,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Sp, Task::Rt, Task::Ta];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sp => "sp",
            Task::Rt => "rt",
            Task::Ta => "ta",
        }
    }
}

/// Subset of the auxiliary tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TaskSet {
    pub sp: bool,
    pub rt: bool,
    pub ta: bool,
}

impl TaskSet {
    pub const NONE: TaskSet = TaskSet {
        sp: false,
        rt: false,
        ta: false,
    };
    pub const ALL: TaskSet = TaskSet {
        sp: true,
        rt: true,
        ta: true,
    };

    pub fn only(task: Task) -> Self {
        let mut s = TaskSet::NONE;
        s.insert(task);
        s
    }

    pub fn contains(self, task: Task) -> bool {
        match task {
            Task::Sp => self.sp,
            Task::Rt => self.rt,
            Task::Ta => self.ta,
        }
    }

    pub fn insert(&mut self, task: Task) {
        match task {
            Task::Sp => self.sp = true,
            Task::Rt => self.rt = true,
            Task::Ta => self.ta = true,
        }
    }

    pub fn is_empty(self) -> bool {
        !(self.sp || self.rt || self.ta)
    }

    pub fn iter(self) -> impl Iterator<Item = Task> {
        Task::ALL.into_iter().filter(move |t| self.contains(*t))
    }
}

impl FromStr for TaskSet {
    type Err = Error;

    /// Comma-separated list of `sp`, `rt`, `ta`; the empty string is the
    /// empty set.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = TaskSet::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let task = match part.to_ascii_lowercase().as_str() {
                "sp" => Task::Sp,
                "rt" => Task::Rt,
                "ta" => Task::Ta,
                other => {
                    return Err(Error::Config(format!(
                        "unknown task {other:?} (expected sp, rt or ta)"
                    )))
                }
            };
            set.insert(task);
        }
        Ok(set)
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Task::name).collect();
        f.write_str(&names.join(","))
    }
}

impl Serialize for TaskSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for TaskSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tasks = Vec::<Task>::deserialize(d)?;
        let mut set = TaskSet::NONE;
        tasks.into_iter().for_each(|t| set.insert(t));
        Ok(set)
    }
}

/// Flips the selected auxiliary labels; the main label is never touched.
pub fn invert_labels(instance: &Instance, tasks: TaskSet) -> Instance {
    let mut out = instance.clone();
    invert_in_place(&mut out, tasks);
    out
}

pub fn invert_in_place(instance: &mut Instance, tasks: TaskSet) {
    if tasks.sp {
        instance.y_sp = !instance.y_sp;
    }
    if tasks.rt {
        instance.y_rt = !instance.y_rt;
    }
    if tasks.ta {
        instance.y_ta.iter_mut().for_each(|y| *y = !*y);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatternStat {
    pub pattern: ThreadPattern,
    pub count: usize,
    pub positives: usize,
    pub rate: f64,
}

/// Per-pattern instance counts and re-entry rates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatternStats {
    counts: BTreeMap<ThreadPattern, (usize, usize)>,
}

impl PatternStats {
    pub fn get(&self, pattern: &str) -> Option<PatternStat> {
        let key = ThreadPattern(pattern.to_string());
        self.counts
            .get(&key)
            .map(|&(count, positives)| PatternStat {
                pattern: key,
                count,
                positives,
                rate: positives as f64 / count as f64,
            })
    }

    pub fn rate(&self, pattern: &str) -> Option<f64> {
        self.get(pattern).map(|s| s.rate)
    }

    /// Rows sorted by descending count, then pattern.
    pub fn rows(&self) -> Vec<PatternStat> {
        let mut rows: Vec<PatternStat> = self
            .counts
            .iter()
            .map(|(p, &(count, positives))| PatternStat {
                pattern: p.clone(),
                count,
                positives,
                rate: positives as f64 / count as f64,
            })
            .collect();
        rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.pattern.cmp(&b.pattern)));
        rows
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// `pattern\tcount\treentry_rate` with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("pattern\tcount\treentry_rate\n");
        for r in self.rows() {
            out.push_str(&format!("{}\t{}\t{:.4}\n", r.pattern, r.count, r.rate));
        }
        out
    }
}

pub fn pattern_stats(instances: &[Instance]) -> PatternStats {
    let mut counts: BTreeMap<ThreadPattern, (usize, usize)> = BTreeMap::new();
    for inst in instances {
        let e = counts.entry(inst.pattern()).or_default();
        e.0 += 1;
        e.1 += usize::from(inst.y_main);
    }
    PatternStats { counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(authors: &[&str]) -> Vec<Turn> {
        authors
            .iter()
            .map(|a| Turn::new(UserId::new(*a).unwrap(), vec!["x".into()]).unwrap())
            .collect()
    }

    fn uid(s: &str) -> UserId {
        UserId::new(s).unwrap()
    }

    #[test]
    fn patterns_follow_first_appearance() {
        assert_eq!(
            thread_pattern(&ctx(&["u5", "u9", "u5"])).unwrap().as_str(),
            "ABA"
        );
        assert_eq!(
            thread_pattern(&ctx(&["x", "y", "z", "x"]))
                .unwrap()
                .as_str(),
            "ABCA"
        );
        assert_eq!(thread_pattern(&ctx(&["q"])).unwrap().as_str(), "A");
        assert!(thread_pattern(&[]).is_err());
    }

    #[test]
    fn more_than_26_users_get_suffixes() {
        let names: Vec<String> = (0..30).map(|i| format!("user{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut authors = refs.clone();
        authors.push("user27");
        let p = thread_pattern(&ctx(&authors)).unwrap();
        assert!(p.as_str().starts_with("ABCDEFGHIJKLMNOPQRSTUVWXYZA1B1C1D1"));
        assert!(p.as_str().ends_with("D1B1"));
        assert_eq!(p.len(), 31);
        assert_eq!(p.num_users(), 30);
        assert_eq!(p.as_str().parse::<ThreadPattern>().unwrap(), p);
    }

    #[test]
    fn parse_rejects_non_canonical() {
        assert!("ABA".parse::<ThreadPattern>().is_ok());
        assert!("BA".parse::<ThreadPattern>().is_err());
        assert!("AC".parse::<ThreadPattern>().is_err());
        assert!("".parse::<ThreadPattern>().is_err());
        assert!("Ab".parse::<ThreadPattern>().is_err());
        assert!("A0".parse::<ThreadPattern>().is_err());
    }

    #[test]
    fn spread_pattern_examples() {
        assert!(sp_label(&ctx(&["a", "b", "a", "b"])));
        assert!(!sp_label(&ctx(&["a", "b", "c"])));
        assert!(sp_label(&ctx(&["a"])));
    }

    #[test]
    fn repeated_target_examples() {
        assert!(rt_label(&ctx(&["a", "b", "a"]), &uid("a")).unwrap());
        assert!(!rt_label(&ctx(&["a", "b"]), &uid("b")).unwrap());
        assert!(rt_label(&ctx(&["a", "b", "c", "a"]), &uid("a")).unwrap());
        assert!(matches!(
            rt_label(&ctx(&["a", "b"]), &uid("a")),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn turn_authorship_examples() {
        assert_eq!(
            ta_labels(&ctx(&["a", "b", "c", "a"]), &uid("a")).unwrap(),
            vec![true, false, false]
        );
        assert_eq!(
            ta_labels(&ctx(&["a", "b"]), &uid("b")).unwrap(),
            vec![false]
        );
        assert_eq!(
            ta_labels(&ctx(&["a", "b", "a", "b"]), &uid("b")).unwrap(),
            vec![false, true, false]
        );
        assert!(ta_labels(&ctx(&["a"]), &uid("a")).is_err());
        assert!(ta_labels(&ctx(&["a", "b"]), &uid("a")).is_err());
    }

    #[test]
    fn task_set_parsing() {
        assert_eq!("".parse::<TaskSet>().unwrap(), TaskSet::NONE);
        assert_eq!("sp,rt,ta".parse::<TaskSet>().unwrap(), TaskSet::ALL);
        assert_eq!(" TA ".parse::<TaskSet>().unwrap(), TaskSet::only(Task::Ta));
        assert!("sp,xx".parse::<TaskSet>().is_err());
        assert_eq!(TaskSet::ALL.to_string(), "sp,rt,ta");
        let json = serde_json::to_string(&"rt,sp".parse::<TaskSet>().unwrap()).unwrap();
        assert_eq!(json, r#"["sp","rt"]"#);
        let back: TaskSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_string(), "sp,rt");
    }

    fn instance(authors: &[&str], y_main: bool) -> Instance {
        let context = ctx(authors);
        let target = context.last().unwrap().author.clone();
        Instance {
            conv_id: "c".into(),
            position: context.len(),
            y_sp: sp_label(&context),
            y_rt: rt_label(&context, &target).unwrap(),
            y_ta: ta_labels(&context, &target).unwrap(),
            context,
            target,
            history: Default::default(),
            y_main,
        }
    }

    #[test]
    fn inversion_flips_only_selected_labels() {
        let inst = instance(&["a", "b", "c", "a"], true);
        assert!(!inst.y_sp);
        let sp = invert_labels(&inst, TaskSet::only(Task::Sp));
        assert!(sp.y_sp);
        assert_eq!(sp.y_rt, inst.y_rt);
        assert_eq!(sp.y_ta, inst.y_ta);
        assert_eq!(sp.y_main, inst.y_main);

        let ta = invert_labels(&inst, TaskSet::only(Task::Ta));
        assert_eq!(ta.y_ta, vec![false, true, true]);
        assert_eq!(invert_labels(&inst, TaskSet::NONE), inst);
        assert_eq!(
            invert_labels(&invert_labels(&inst, TaskSet::ALL), TaskSet::ALL),
            inst
        );
    }

    #[test]
    fn stats_report_rates() {
        let mut insts = Vec::new();
        for i in 0..100 {
            insts.push(instance(&["a", "b"], i < 27));
        }
        insts.push(instance(&["a", "b", "a"], true));
        let stats = pattern_stats(&insts);
        assert!((stats.rate("AB").unwrap() - 0.27).abs() < 1e-12);
        assert_eq!(stats.rate("ABA"), Some(1.0));
        assert_eq!(stats.rate("ABC"), None);
        let tsv = stats.to_tsv();
        assert_eq!(tsv.lines().nth(1).unwrap(), "AB\t100\t0.2700");
        assert_eq!(stats.len(), 2);
    }

    proptest! {
        #[test]
        fn pattern_invariant_under_renaming(
            seq in prop::collection::vec(0usize..6, 1..15),
            perm_seed in any::<u64>(),
        ) {
            let names: Vec<String> = seq.iter().map(|i| format!("u{i}")).collect();
            // bijective renaming: rotate ids by a seed-dependent offset and suffix
            let off = (perm_seed % 6) as usize;
            let renamed: Vec<String> = seq.iter().map(|i| format!("v{}_{}", (i + off) % 6, perm_seed)).collect();
            let a: Vec<&str> = names.iter().map(String::as_str).collect();
            let b: Vec<&str> = renamed.iter().map(String::as_str).collect();
            let pa = thread_pattern(&ctx(&a)).unwrap();
            let pb = thread_pattern(&ctx(&b)).unwrap();
            prop_assert_eq!(&pa, &pb);
            prop_assert!(pa.as_str().starts_with('A'));
            prop_assert_eq!(pa.len(), seq.len());
        }

        #[test]
        fn ta_sum_positive_iff_repeated_target(seq in prop::collection::vec(0usize..4, 2..12)) {
            let names: Vec<String> = seq.iter().map(|i| format!("u{i}")).collect();
            let a: Vec<&str> = names.iter().map(String::as_str).collect();
            let c = ctx(&a);
            let target = c.last().unwrap().author.clone();
            let ta = ta_labels(&c, &target).unwrap();
            prop_assert_eq!(ta.iter().any(|y| *y), rt_label(&c, &target).unwrap());
        }
    }
}
