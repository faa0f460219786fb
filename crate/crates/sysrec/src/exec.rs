//! Thread-pool executor and hosted training observers.

use std::time::Instant;

use rayon::prelude::*;
use rayon::ThreadPool;

use sysrec_core::train::{EpochRecord, Executor, TrainObserver};

/// Runs jobs on a dedicated rayon pool. Results come back in index order,
/// so reductions over them are schedule-independent.
pub struct Rayon {
    pool: ThreadPool,
}

impl Rayon {
    pub fn new(threads: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
        Ok(Self { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Rayon {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}

/// Records one progress line per epoch and supplies wall-clock time.
pub struct ProgressLog {
    start: Instant,
    lines: Vec<String>,
    echo: bool,
}

impl ProgressLog {
    pub fn new(echo: bool) -> Self {
        Self {
            start: Instant::now(),
            lines: Vec::new(),
            echo,
        }
    }

    /// `epoch loss support segment tau`, one line per epoch, no timings.
    pub fn text(&self) -> String {
        let mut s = String::from("epoch loss support_size segment tau\n");
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

impl TrainObserver for ProgressLog {
    fn on_epoch(&mut self, r: &EpochRecord) {
        let line = format!(
            "{} {} {} {} {}",
            r.epoch,
            crate::io::num(r.loss),
            r.support_size,
            r.segment,
            crate::io::num(r.tau)
        );
        if self.echo {
            eprintln!("{line}");
        }
        self.lines.push(line);
    }

    fn seconds(&self) -> Option<f64> {
        Some(self.start.elapsed().as_secs_f64())
    }
}
