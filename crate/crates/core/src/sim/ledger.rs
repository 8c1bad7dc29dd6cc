use serde::{Deserialize, Serialize};

use super::NodeIdx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageClass {
    CellTransfer,
    Signaling,
    Header,
}

impl MessageClass {
    pub const ALL: [MessageClass; 3] = [MessageClass::CellTransfer, MessageClass::Signaling, MessageClass::Header];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounters {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub bytes_dropped: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
}

impl ClassCounters {
    fn add(&mut self, other: &ClassCounters) {
        self.bytes_sent += other.bytes_sent;
        self.bytes_received += other.bytes_received;
        self.bytes_dropped += other.bytes_dropped;
        self.messages_sent += other.messages_sent;
        self.messages_dropped += other.messages_dropped;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficCounters {
    by_class: [ClassCounters; 3],
}

impl TrafficCounters {
    pub fn class(&self, class: MessageClass) -> &ClassCounters {
        &self.by_class[class.index()]
    }

    fn class_mut(&mut self, class: MessageClass) -> &mut ClassCounters {
        &mut self.by_class[class.index()]
    }

    pub fn total(&self) -> ClassCounters {
        let mut t = ClassCounters::default();
        for c in &self.by_class {
            t.add(c);
        }
        t
    }

    pub fn bytes_sent(&self) -> u64 {
        self.total().bytes_sent
    }

    pub fn bytes_received(&self) -> u64 {
        self.total().bytes_received
    }

    pub fn bytes_dropped(&self) -> u64 {
        self.total().bytes_dropped
    }
}

/// Per-node and global byte/message counters split by message class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficLedger {
    per_node: Vec<TrafficCounters>,
    global: TrafficCounters,
}

impl TrafficLedger {
    pub fn new(node_count: usize) -> Self {
        TrafficLedger {
            per_node: vec![TrafficCounters::default(); node_count],
            global: TrafficCounters::default(),
        }
    }

    pub fn node(&self, node: NodeIdx) -> &TrafficCounters {
        &self.per_node[node as usize]
    }

    pub fn global(&self) -> &TrafficCounters {
        &self.global
    }

    pub fn node_count(&self) -> usize {
        self.per_node.len()
    }

    pub(crate) fn record_send(&mut self, from: NodeIdx, bytes: u64, class: MessageClass) {
        for c in [self.per_node[from as usize].class_mut(class), self.global.class_mut(class)] {
            c.bytes_sent += bytes;
            c.messages_sent += 1;
        }
    }

    pub(crate) fn record_receive(&mut self, to: NodeIdx, bytes: u64, class: MessageClass) {
        self.per_node[to as usize].class_mut(class).bytes_received += bytes;
        self.global.class_mut(class).bytes_received += bytes;
    }

    pub(crate) fn record_drop(&mut self, from: NodeIdx, bytes: u64, class: MessageClass) {
        for c in [self.per_node[from as usize].class_mut(class), self.global.class_mut(class)] {
            c.bytes_dropped += bytes;
            c.messages_dropped += 1;
        }
    }

    /// Adds another ledger's counters into this one (same node count).
    pub fn merge(&mut self, other: &TrafficLedger) {
        assert_eq!(self.per_node.len(), other.per_node.len(), "ledger size mismatch");
        for (a, b) in self.per_node.iter_mut().zip(&other.per_node) {
            for class in MessageClass::ALL {
                a.class_mut(class).add(b.class(class));
            }
        }
        for class in MessageClass::ALL {
            self.global.class_mut(class).add(other.global.class(class));
        }
    }

    /// `sent == received + dropped` globally.
    pub fn is_conserved(&self) -> bool {
        let t = self.global.total();
        t.bytes_sent == t.bytes_received + t.bytes_dropped
    }
}
