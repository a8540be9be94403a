use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::Seconds;

struct Entry<T> {
    time: Seconds,
    seq: u64,
    item: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Future event list ordered by `(time, seq)`; `seq` is assigned at
/// scheduling so equal-time events dispatch in scheduling order.
pub struct EventQueue<T> {
    heap: BinaryHeap<Entry<T>>,
    next_seq: u64,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
        }
    }
}

impl<T> EventQueue<T> {
    pub fn schedule(&mut self, time: Seconds, item: T) -> u64 {
        assert!(time.is_finite(), "event time must be finite");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time, seq, item });
        seq
    }

    pub fn peek_time(&self) -> Option<Seconds> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn pop(&mut self) -> Option<(Seconds, u64, T)> {
        self.heap.pop().map(|e| (e.time, e.seq, e.item))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_break_by_scheduling_order() {
        let mut q = EventQueue::default();
        q.schedule(1.0, "b");
        q.schedule(0.5, "a");
        q.schedule(1.0, "c");
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|e| e.2)).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
    }

    proptest! {
        #[test]
        fn dispatch_is_time_then_seq_ordered(times in prop::collection::vec(0u32..50, 0..200)) {
            let mut q = EventQueue::default();
            for (i, t) in times.iter().enumerate() {
                q.schedule(f64::from(*t) * 0.25, i);
            }
            let mut last = (f64::NEG_INFINITY, 0u64);
            while let Some((t, seq, _)) = q.pop() {
                prop_assert!(t > last.0 || (t == last.0 && seq > last.1));
                last = (t, seq);
            }
        }
    }
}
