use std::time::Duration;

use parking_lot::Mutex;

const GIB: f64 = (1u64 << 30) as f64;

/// Billable memory of one call: peak bytes in GiB times wall seconds.
pub fn gb_seconds(peak_bytes: usize, wall: Duration) -> f64 {
    peak_bytes as f64 / GIB * wall.as_secs_f64()
}

/// Running total of billable memory over all calls on a node.
#[derive(Default)]
pub struct BillingMeter {
    inner: Mutex<(f64, u64)>,
}

impl BillingMeter {
    pub fn record(&self, peak_bytes: usize, wall: Duration) {
        let mut g = self.inner.lock();
        g.0 += gb_seconds(peak_bytes, wall);
        g.1 += 1;
    }

    pub fn gb_seconds(&self) -> f64 {
        self.inner.lock().0
    }

    pub fn calls(&self) -> u64 {
        self.inner.lock().1
    }
}
