//! Sound event detection post-processing: per-class median filtering, event
//! decoding, collar-based and intersection-based F1, and the events TSV format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Tolerance applied to every boundary comparison so that decimal fixtures
/// such as `0.9 - 0.7` (which is `0.20000000000000007` in binary) land on
/// the side their decimal values put them.
const BOUNDARY_SLACK: f64 = 1e-9;

pub const TSV_HEADER: &str = "filename\tonset\toffset\tevent_label";

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub clip: String,
    pub onset: f64,
    pub offset: f64,
    pub label: String,
}

impl Event {
    pub fn new(clip: impl Into<String>, onset: f64, offset: f64, label: impl Into<String>) -> Result<Self> {
        if !(onset.is_finite() && offset.is_finite() && 0.0 <= onset && onset < offset) {
            return Err(Error::InvalidArgument(format!("event needs 0 <= onset < offset, got ({onset}, {offset})")));
        }
        Ok(Self { clip: clip.into(), onset, offset, label: label.into() })
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }

    fn overlap(&self, other: &Event) -> f64 {
        (self.offset.min(other.offset) - self.onset.max(other.onset)).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostConfig {
    pub threshold: f64,
    /// One odd window length (in frames) per class.
    pub median_windows: Vec<usize>,
    pub frame_hop_seconds: f64,
}

impl PostConfig {
    pub const DEFAULT_WINDOW: usize = 7;

    pub fn new(classes: usize, frame_hop_seconds: f64) -> Self {
        Self { threshold: 0.5, median_windows: vec![Self::DEFAULT_WINDOW; classes], frame_hop_seconds }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.median_windows.len() != classes {
            return Err(Error::Config(format!(
                "{} median windows configured for {classes} classes",
                self.median_windows.len()
            )));
        }
        if let Some(w) = self.median_windows.iter().find(|&&w| w == 0 || w % 2 == 0) {
            return Err(Error::Config(format!("median window {w} must be odd and at least 1")));
        }
        if !(self.frame_hop_seconds > 0.0) {
            return Err(Error::Config("frame hop must be positive".into()));
        }
        Ok(())
    }
}

/// Sliding median over time for each class row of `[classes, T]`, with the
/// edge values replicated outwards.
pub fn median_filter<T: Real>(scores: &Tensor<T>, windows: &[usize]) -> Result<Tensor<T>> {
    let [classes, frames] = scores.dims::<2>("scores")?;
    if windows.len() != classes {
        return Err(Error::InvalidArgument(format!("{} windows for {classes} classes", windows.len())));
    }
    let mut out = Vec::with_capacity(scores.len());
    let mut buf = Vec::new();
    for (c, &w) in windows.iter().enumerate() {
        if w == 0 || w % 2 == 0 {
            return Err(Error::InvalidArgument(format!("median window {w} for class {c} must be odd")));
        }
        let row = &scores.data()[c * frames..(c + 1) * frames];
        let half = (w / 2) as isize;
        for t in 0..frames as isize {
            buf.clear();
            buf.extend((t - half..=t + half).map(|i| row[i.clamp(0, frames as isize - 1) as usize]));
            buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            out.push(buf[w / 2]);
        }
    }
    Tensor::new([classes, frames], out)
}

/// Thresholds `[classes, T]` scores (strictly above `threshold` is active) and
/// turns each maximal active run into one event.
pub fn decode_events<T: Real>(
    scores: &Tensor<T>,
    cfg: &PostConfig,
    clip: &str,
    labels: &[String],
) -> Result<Vec<Event>> {
    let [classes, frames] = scores.dims::<2>("scores")?;
    if labels.len() != classes {
        return Err(Error::InvalidArgument(format!("{} labels for {classes} classes", labels.len())));
    }
    let hop = cfg.frame_hop_seconds;
    let mut events = Vec::new();
    for (c, label) in labels.iter().enumerate() {
        let row = &scores.data()[c * frames..(c + 1) * frames];
        let mut start = None;
        for t in 0..=frames {
            let active = t < frames && row[t].to_f64().unwrap_or(0.0) > cfg.threshold;
            match (active, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    events.push(Event::new(clip, s as f64 * hop, t as f64 * hop, label.clone())?);
                    start = None;
                }
                _ => {}
            }
        }
    }
    Ok(events)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `2TP / (2TP + FP + FN)`, or `None` when there was nothing to score.
    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub per_class: BTreeMap<String, Counts>,
}

impl F1Report {
    pub fn class_f1(&self, label: &str) -> Option<f64> {
        self.per_class.get(label).and_then(Counts::f1)
    }

    /// Unweighted mean over classes that have at least one reference or
    /// hypothesis event; 0 when no class qualifies.
    pub fn macro_f1(&self) -> f64 {
        let scores: Vec<f64> = self.per_class.values().filter_map(Counts::f1).collect();
        if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }
}

type Groups<'a> = BTreeMap<(&'a str, &'a str), Vec<&'a Event>>;

/// Groups events by (label, clip), each group sorted by onset then offset.
fn group(events: &[Event]) -> Groups<'_> {
    let mut groups: Groups<'_> = BTreeMap::new();
    for e in events {
        groups.entry((e.label.as_str(), e.clip.as_str())).or_default().push(e);
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.offset.total_cmp(&b.offset)));
    }
    groups
}

fn score(reference: &[Event], hypothesis: &[Event], per_group: impl Fn(&[&Event], &[&Event]) -> Counts) -> F1Report {
    let (refs, hyps) = (group(reference), group(hypothesis));
    let keys: BTreeSet<_> = refs.keys().chain(hyps.keys()).copied().collect();
    let mut per_class: BTreeMap<String, Counts> = BTreeMap::new();
    for key in keys {
        let r = refs.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        let h = hyps.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        per_class.entry(key.0.to_string()).or_default().add(per_group(r, h));
    }
    F1Report { per_class }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collars {
    pub onset: f64,
    pub offset_min: f64,
    /// Fraction of the reference duration allowed as offset deviation.
    pub offset_ratio: f64,
}

impl Default for Collars {
    fn default() -> Self {
        Self { onset: 0.2, offset_min: 0.2, offset_ratio: 0.2 }
    }
}

/// Collar-based F1 with greedy one-to-one matching in onset order.
pub fn collar_f1(reference: &[Event], hypothesis: &[Event], collars: Collars) -> F1Report {
    score(reference, hypothesis, |refs, hyps| {
        let mut used = vec![false; hyps.len()];
        let mut tp = 0;
        for r in refs {
            let offset_collar = collars.offset_min.max(collars.offset_ratio * r.duration());
            let hit = hyps.iter().enumerate().position(|(j, h)| {
                !used[j]
                    && (h.onset - r.onset).abs() <= collars.onset + BOUNDARY_SLACK
                    && (h.offset - r.offset).abs() <= offset_collar + BOUNDARY_SLACK
            });
            if let Some(j) = hit {
                used[j] = true;
                tp += 1;
            }
        }
        Counts { tp, fp: hyps.len() - tp, fn_: refs.len() - tp }
    })
}

/// Intersection-based F1 with detection tolerance `dtc` and ground-truth
/// tolerance `gtc`, evaluated independently per clip without cross-triggers.
pub fn intersection_f1(reference: &[Event], hypothesis: &[Event], dtc: f64, gtc: f64) -> Result<F1Report> {
    for (name, v) in [("dtc", dtc), ("gtc", gtc)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1], got {v}")));
        }
    }
    Ok(score(reference, hypothesis, |refs, hyps| {
        let candidate: Vec<bool> = hyps
            .iter()
            .map(|h| refs.iter().map(|r| h.overlap(r)).sum::<f64>() / h.duration() >= dtc - BOUNDARY_SLACK)
            .collect();
        let tp = refs
            .iter()
            .filter(|r| {
                let covered: f64 = hyps.iter().zip(&candidate).filter(|(_, &c)| c).map(|(h, _)| r.overlap(h)).sum();
                covered / r.duration() >= gtc - BOUNDARY_SLACK
            })
            .count();
        let fp = candidate.iter().filter(|&&c| !c).count();
        Counts { tp, fp, fn_: refs.len() - tp }
    }))
}

/// Formats seconds with at least three fractional digits and no precision loss.
fn fmt_seconds(v: f64) -> String {
    let short = format!("{v:.3}");
    if short.parse::<f64>().ok() == Some(v) {
        return short;
    }
    let exact = format!("{v}");
    match exact.find('.') {
        Some(dot) if exact.len() - dot > 3 => exact,
        _ => format!("{v:.6}"),
    }
}

pub fn events_to_tsv(events: &[Event]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for e in events {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.clip, fmt_seconds(e.onset), fmt_seconds(e.offset), e.label);
    }
    out
}

pub fn events_from_tsv(text: &str) -> Result<Vec<Event>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == TSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse { line: 1, message: format!("expected header `{TSV_HEADER}`, got `{h}`") })
        }
        None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
    }
    let mut events = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let [clip, onset, offset, label] = fields[..] else {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad number `{s}`: {e}")));
        events.push(Event::new(clip, num(onset)?, num(offset)?, label).map_err(|e| err(e.to_string()))?);
    }
    Ok(events)
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<Event>> {
    events_from_tsv(&std::fs::read_to_string(path)?)
}

pub fn write_events(path: impl AsRef<Path>, events: &[Event]) -> Result<()> {
    Ok(std::fs::write(path, events_to_tsv(events))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn ev(onset: f64, offset: f64) -> Event {
        Event::new("a.wav", onset, offset, "speech").unwrap()
    }

    fn row(values: &[f64]) -> Tensor<f64> {
        Tensor::new([1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn median_examples() {
        let x = row(&[0.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(median_filter(&x, &[1]).unwrap(), x);
        assert_eq!(median_filter(&x, &[3]).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(median_filter(&x, &[4]).is_err());
    }

    #[test]
    fn median_matches_sorted_window_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let t = 40;
        let x = Tensor::from_fn([3, t], |_| rng.random_range(0.0..1.0)).unwrap();
        let windows = [1, 5, 9];
        let got = median_filter(&x, &windows).unwrap();
        for (c, &w) in windows.iter().enumerate() {
            for i in 0..t as isize {
                let mut win: Vec<f64> = (i - w as isize / 2..=i + w as isize / 2)
                    .map(|j| x.get(&[c, j.max(0).min(t as isize - 1) as usize]).unwrap())
                    .collect();
                win.sort_by(f64::total_cmp);
                assert_eq!(got.get(&[c, i as usize]).unwrap(), win[w / 2]);
            }
        }
    }

    #[test]
    fn decoding() {
        let labels = vec!["speech".to_string()];
        let cfg = PostConfig { threshold: 0.5, median_windows: vec![1], frame_hop_seconds: 0.02 };
        assert!(decode_events(&row(&[0.0; 30]), &cfg, "a.wav", &labels).unwrap().is_empty());

        let mut v = vec![0.0; 30];
        v[10..20].iter_mut().for_each(|x| *x = 0.9);
        let got = decode_events(&row(&v), &cfg, "a.wav", &labels).unwrap();
        assert_eq!(got.len(), 1);
        assert!((got[0].onset - 0.2).abs() < 1e-12 && (got[0].offset - 0.4).abs() < 1e-12);

        v[15] = 0.1;
        assert_eq!(decode_events(&row(&v), &cfg, "a.wav", &labels).unwrap().len(), 2);

        let full = decode_events(&row(&[1.0; 25]), &cfg, "a.wav", &labels).unwrap();
        assert_eq!(full.len(), 1);
        assert_eq!((full[0].onset, full[0].offset), (0.0, 25.0 * 0.02));
    }

    #[test]
    fn collar_examples() {
        let r = [ev(0.0, 1.0)];
        assert_eq!(collar_f1(&r, &r, Collars::default()).macro_f1(), 1.0);
        let hit = collar_f1(&r, &[ev(0.15, 1.1)], Collars::default());
        assert_eq!(hit.per_class["speech"], Counts { tp: 1, fp: 0, fn_: 0 });
        let miss = collar_f1(&r, &[ev(0.25, 1.0)], Collars::default());
        assert_eq!(miss.per_class["speech"], Counts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn intersection_examples() {
        let r = [ev(0.0, 1.0)];
        assert_eq!(intersection_f1(&r, &r, 0.5, 0.5).unwrap().macro_f1(), 1.0);
        let hit = intersection_f1(&r, &[ev(0.4, 1.4)], 0.5, 0.5).unwrap();
        assert_eq!(hit.per_class["speech"], Counts { tp: 1, fp: 0, fn_: 0 });
        let miss = intersection_f1(&r, &[ev(0.8, 2.0)], 0.5, 0.5).unwrap();
        assert_eq!(miss.per_class["speech"], Counts { tp: 0, fp: 1, fn_: 1 });
        assert!(intersection_f1(&r, &r, 0.0, 0.5).is_err());
    }

    #[test]
    fn empty_lists() {
        let r = [ev(0.0, 1.0)];
        assert_eq!(collar_f1(&r, &[], Collars::default()).macro_f1(), 0.0);
        let none = collar_f1(&[], &[], Collars::default());
        assert!(none.per_class.is_empty());
        assert_eq!(none.macro_f1(), 0.0);
    }

    #[test]
    fn order_does_not_matter() {
        let refs = vec![
            Event::new("b.wav", 0.0, 2.0, "dog").unwrap(),
            Event::new("a.wav", 1.0, 3.0, "dog").unwrap(),
            Event::new("a.wav", 0.5, 0.9, "cat").unwrap(),
        ];
        let hyps = vec![
            Event::new("a.wav", 1.1, 3.1, "dog").unwrap(),
            Event::new("b.wav", 0.3, 1.0, "dog").unwrap(),
            Event::new("a.wav", 0.4, 1.0, "cat").unwrap(),
        ];
        let (mut r2, mut h2) = (refs.clone(), hyps.clone());
        r2.reverse();
        h2.rotate_left(1);
        assert_eq!(collar_f1(&refs, &hyps, Collars::default()), collar_f1(&r2, &h2, Collars::default()));
        assert_eq!(intersection_f1(&refs, &hyps, 0.5, 0.5).unwrap(), intersection_f1(&r2, &h2, 0.5, 0.5).unwrap());
    }

    #[test]
    fn tsv_round_trip() {
        let events = vec![ev(0.0, 1.0), Event::new("b c.wav", 0.016, 2.123456789, "Alarm_bell").unwrap()];
        let text = events_to_tsv(&events);
        assert!(text.starts_with("filename\tonset\toffset\tevent_label\n"));
        assert!(text.contains("a.wav\t0.000\t1.000\tspeech\n"));
        assert_eq!(events_from_tsv(&text).unwrap(), events);
        assert!(matches!(
            events_from_tsv("filename\tonset\toffset\tevent_label\nx\t1\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(events_from_tsv("nope\n"), Err(Error::Parse { line: 1, .. })));
        assert!(events_from_tsv("filename\tonset\toffset\tevent_label\nx\t2\t1\tdog\n").is_err());
    }
}
