use crate::kernels;

/// Events per block.
pub const BLOCK_EVENTS: u64 = 1024;

/// A run of up to 1024 consecutive event slots with the normalized mean of
/// its live embeddings.
///
/// The sum of live embeddings is kept in f64 and the centroid is
/// renormalized from it after every change, so it tracks the exact mean
/// rather than accumulating rounding drift.
#[derive(Debug, Clone)]
pub struct TraceBlock {
    pub index: u32,
    pub first_slot: u64,
    pub count: u32,
    pub live_count: u32,
    sum: Vec<f64>,
    centroid: Vec<f32>,
}

impl TraceBlock {
    pub fn new(index: u32, dim: usize) -> TraceBlock {
        TraceBlock {
            index,
            first_slot: u64::from(index) * BLOCK_EVENTS,
            count: 0,
            live_count: 0,
            sum: vec![0.0; dim],
            centroid: vec![0.0; dim],
        }
    }

    pub fn centroid(&self) -> &[f32] {
        &self.centroid
    }

    pub fn is_full(&self) -> bool {
        u64::from(self.count) >= BLOCK_EVENTS
    }

    pub(crate) fn add(&mut self, e: &[f32], live: bool) {
        self.count += 1;
        if live {
            self.live_count += 1;
            for (s, &x) in self.sum.iter_mut().zip(e) {
                *s += f64::from(x);
            }
            self.refresh();
        }
    }

    pub(crate) fn remove(&mut self, e: &[f32]) {
        debug_assert!(self.live_count > 0);
        self.live_count -= 1;
        if self.live_count == 0 {
            self.sum.fill(0.0);
        } else {
            for (s, &x) in self.sum.iter_mut().zip(e) {
                *s -= f64::from(x);
            }
        }
        self.refresh();
    }

    fn refresh(&mut self) {
        let norm = self.sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || self.live_count == 0 {
            self.centroid.fill(0.0);
        } else {
            for (c, s) in self.centroid.iter_mut().zip(&self.sum) {
                *c = (s / norm) as f32;
            }
        }
    }

    pub(crate) fn score(&self, q: &[f32]) -> f32 {
        kernels::dot_f32(q, &self.centroid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_member_centroid_is_the_member() {
        let mut b = TraceBlock::new(0, 4);
        b.add(&[0.6, 0.8, 0.0, 0.0], true);
        assert_eq!(b.centroid(), &[0.6, 0.8, 0.0, 0.0]);
        assert_eq!((b.count, b.live_count), (1, 1));
    }

    #[test]
    fn removal_restores_previous_centroid() {
        let mut b = TraceBlock::new(3, 3);
        assert_eq!(b.first_slot, 3072);
        b.add(&[1.0, 0.0, 0.0], true);
        b.add(&[0.0, 1.0, 0.0], true);
        b.add(&[0.0, 0.0, 1.0], true);
        let third = 1.0 / 3f32.sqrt();
        assert!(b.centroid().iter().all(|c| (c - third).abs() < 1e-6));
        b.remove(&[0.0, 0.0, 1.0]);
        let half = 1.0 / 2f32.sqrt();
        assert!((b.centroid()[0] - half).abs() < 1e-6 && b.centroid()[2].abs() < 1e-12);
        b.remove(&[1.0, 0.0, 0.0]);
        b.remove(&[0.0, 1.0, 0.0]);
        assert_eq!(b.centroid(), &[0.0, 0.0, 0.0]);
        assert_eq!((b.count, b.live_count), (3, 0));
    }
}
