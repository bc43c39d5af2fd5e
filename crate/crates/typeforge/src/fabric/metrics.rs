//! Message counters, staleness histogram, and the trace log.

use std::collections::BTreeMap;

/// Classification of every message crossing the interconnect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgKind {
    OneSided,
    Channel,
    HaloFace,
    ReductionMsg,
}

pub const MSG_KINDS: [MsgKind; 4] = [
    MsgKind::OneSided,
    MsgKind::Channel,
    MsgKind::HaloFace,
    MsgKind::ReductionMsg,
];

impl MsgKind {
    pub fn index(self) -> usize {
        match self {
            MsgKind::OneSided => 0,
            MsgKind::Channel => 1,
            MsgKind::HaloFace => 2,
            MsgKind::ReductionMsg => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MsgKind::OneSided => "one_sided",
            MsgKind::Channel => "channel",
            MsgKind::HaloFace => "halo_face",
            MsgKind::ReductionMsg => "reduction",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KindCounts {
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PerProcess {
    pub sends: u64,
    pub receives: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub seq: u64,
    pub src: usize,
    pub dst: usize,
    pub kind: MsgKind,
    pub bytes: u64,
    pub tag: String,
}

impl TraceEvent {
    pub fn line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.seq,
            self.src,
            self.dst,
            self.kind.label(),
            self.bytes,
            self.tag
        )
    }
}

/// Counter snapshot taken at a named point (one per residual check), for
/// deriving per-iteration message deltas after a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMark {
    pub index: u64,
    pub by_kind: [KindCounts; 4],
}

#[derive(Debug, Default)]
pub struct Metrics {
    by_kind: [KindCounts; 4],
    per_process: Vec<PerProcess>,
    staleness: BTreeMap<i64, u64>,
    marks: Vec<MetricMark>,
}

impl Metrics {
    pub fn new(procs: usize) -> Self {
        Metrics {
            by_kind: Default::default(),
            per_process: vec![PerProcess::default(); procs],
            staleness: BTreeMap::new(),
            marks: Vec::new(),
        }
    }

    pub fn count(&mut self, kind: MsgKind, src: usize, dst: usize, bytes: u64) {
        let c = &mut self.by_kind[kind.index()];
        c.messages += 1;
        c.bytes += bytes;
        self.per_process[src].sends += 1;
        self.per_process[dst].receives += 1;
    }

    pub fn record_staleness(&mut self, lag: i64) {
        *self.staleness.entry(lag).or_insert(0) += 1;
    }

    pub fn mark(&mut self, index: u64) {
        self.marks.push(MetricMark {
            index,
            by_kind: self.by_kind,
        });
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            by_kind: self.by_kind,
            per_process: self.per_process.clone(),
            staleness: self.staleness.clone(),
            marks: self.marks.clone(),
        }
    }
}

/// Immutable copy of all counters, taken after a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsSnapshot {
    pub by_kind: [KindCounts; 4],
    pub per_process: Vec<PerProcess>,
    pub staleness: BTreeMap<i64, u64>,
    pub marks: Vec<MetricMark>,
}

impl MetricsSnapshot {
    pub fn kind(&self, kind: MsgKind) -> KindCounts {
        self.by_kind[kind.index()]
    }

    pub fn total_messages(&self) -> u64 {
        self.by_kind.iter().map(|c| c.messages).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_accumulates_by_kind_and_process() {
        let mut m = Metrics::new(3);
        m.count(MsgKind::OneSided, 1, 0, 8);
        m.count(MsgKind::OneSided, 1, 0, 8);
        m.count(MsgKind::Channel, 2, 1, 4);
        let s = m.snapshot();
        assert_eq!(s.kind(MsgKind::OneSided), KindCounts { messages: 2, bytes: 16 });
        assert_eq!(s.kind(MsgKind::Channel), KindCounts { messages: 1, bytes: 4 });
        assert_eq!(s.per_process[1].sends, 2);
        assert_eq!(s.per_process[2].sends, 1);
        assert_eq!(s.per_process[0].receives, 2);
        assert_eq!(s.total_messages(), 3);
    }

    #[test]
    fn staleness_histogram_counts_lags() {
        let mut m = Metrics::new(1);
        m.record_staleness(1);
        m.record_staleness(1);
        m.record_staleness(3);
        let s = m.snapshot();
        assert_eq!(s.staleness.get(&1), Some(&2));
        assert_eq!(s.staleness.get(&3), Some(&1));
    }

    #[test]
    fn trace_line_format() {
        let e = TraceEvent {
            seq: 7,
            src: 3,
            dst: 1,
            kind: MsgKind::Channel,
            bytes: 4,
            tag: "chan".into(),
        };
        assert_eq!(e.line(), "7 3 1 channel 4 chan");
    }

    #[test]
    fn marks_snapshot_counters() {
        let mut m = Metrics::new(2);
        m.count(MsgKind::HaloFace, 0, 1, 512);
        m.mark(0);
        m.count(MsgKind::HaloFace, 1, 0, 512);
        m.count(MsgKind::HaloFace, 0, 1, 512);
        m.mark(1);
        let s = m.snapshot();
        assert_eq!(s.marks.len(), 2);
        let d = s.marks[1].by_kind[2].messages - s.marks[0].by_kind[2].messages;
        assert_eq!(d, 2);
    }
}
