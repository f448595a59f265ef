//! Desk-scale experiments: snapshot cold starts, cold-start churn and
//! distributed SGD.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use faaslite_core::host::HostEnv;
use faaslite_core::node::ObjectStore;
use faaslite_core::sandbox::{load_object, validate_and_compile, Faaslet, FunctionDef, FunctionId};
use faaslite_core::snapshot::{self, ProtoSnapshot};

use crate::report::{micros, Check, Report, Summary, Table};
use crate::sgd::{self, Dataset, Mode, SgdParams};

pub const DEFAULT_WARMUP: usize = 3;
const MEMORY_LIMIT_PAGES: usize = 16384;

pub fn fixture(name: &str) -> Result<&'static [u8]> {
    faaslite_fixtures::ALL
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| *b)
        .ok_or_else(|| anyhow!("no fixture named {name}"))
}

/// A compiled function with its initialised snapshot, stored in a private
/// object store.
pub struct Prepared {
    pub id: FunctionId,
    pub env: Arc<HostEnv>,
    pub def: Arc<FunctionDef>,
    pub proto: ProtoSnapshot,
    store: ObjectStore,
    module_hash: String,
    _dir: tempfile::TempDir,
}

impl Prepared {
    pub fn new(name: &str) -> Result<Prepared> {
        let bytes = fixture(name)?;
        let id = FunctionId::new("bench", name);
        let env = HostEnv::standalone();
        let def = Arc::new(validate_and_compile(id.clone(), bytes, MEMORY_LIMIT_PAGES)?);
        let (_, proto) = snapshot::capture_initialised(&def, &env)?;
        let dir = tempfile::tempdir()?;
        let store = ObjectStore::open(dir.path())?;
        let module_hash = store.put_module(&id, bytes)?;
        store.put_object(&id.user, &module_hash, &def.object_code()?)?;
        Ok(Prepared {
            id,
            env,
            def,
            proto,
            store,
            module_hash,
            _dir: dir,
        })
    }

    /// Creates a ready Faaslet along `path`.
    pub fn start(&self, path: StartPath) -> Result<Faaslet> {
        Ok(match path {
            StartPath::Full => {
                let module = self.store.module_by_hash(&self.module_hash)?;
                let object = self
                    .store
                    .object(&self.id.user, &self.module_hash)?
                    .context("object code missing")?;
                // The object was produced by `object_code` for these bytes.
                let def = unsafe { load_object(self.id.clone(), &module, &object, MEMORY_LIMIT_PAGES)? };
                let mut f = Faaslet::instantiate(&Arc::new(def), &self.env)?;
                f.run_init()?;
                f
            }
            StartPath::Instantiate => {
                let mut f = Faaslet::instantiate(&self.def, &self.env)?;
                f.run_init()?;
                f
            }
            StartPath::Restore => snapshot::restore(&self.proto, &self.def, &self.env)?,
        })
    }
}

/// How a cold start builds its Faaslet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartPath {
    /// Loads the stored machine code, links, instantiates and runs init.
    Full,
    /// Instantiates an already loaded module and runs init.
    Instantiate,
    /// Restores the initialised snapshot.
    Restore,
}

impl StartPath {
    pub const ALL: [StartPath; 3] = [StartPath::Full, StartPath::Instantiate, StartPath::Restore];

    pub fn name(self) -> &'static str {
        match self {
            StartPath::Full => "full",
            StartPath::Instantiate => "instantiate",
            StartPath::Restore => "restore",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColdstartParams {
    pub samples: usize,
    pub heavy_samples: usize,
    pub warmup: usize,
}

impl Default for ColdstartParams {
    fn default() -> Self {
        ColdstartParams {
            samples: 500,
            heavy_samples: 30,
            warmup: DEFAULT_WARMUP,
        }
    }
}

/// Restore must beat instantiate+init by this factor for the heavy-init
/// function.
pub const HEAVY_SPEEDUP: f64 = 10.0;
pub const NOOP_RESTORE_MAX: Duration = Duration::from_millis(10);

fn sample(n: usize, warmup: usize, mut once: impl FnMut() -> Result<Duration>) -> Result<Summary> {
    let mut out = Vec::with_capacity(n);
    for i in 0..warmup + n {
        let d = once()?;
        if i >= warmup {
            out.push(d);
        }
    }
    Ok(Summary::of(&out))
}

/// Instantiate+init, restore and reset latencies for the no-op and
/// heavy-init functions.
pub fn coldstart(p: &ColdstartParams) -> Result<Report> {
    let mut table = Table::new("coldstart", &["function", "phase", "samples", "median_us", "p99_us"]);
    let mut checks = Vec::new();
    let mut medians = Vec::new();
    for (name, n) in [("noop", p.samples), ("heavy_init", p.heavy_samples)] {
        let prep = Prepared::new(name)?;
        let prep = &prep;
        let timed = |path: StartPath| {
            move || -> Result<Duration> {
                let t = Instant::now();
                let f = prep.start(path)?;
                let d = t.elapsed();
                drop(f);
                Ok(d)
            }
        };
        let inst = sample(n, p.warmup, timed(StartPath::Instantiate))?;
        let restore = sample(n, p.warmup, timed(StartPath::Restore))?;
        let mut f = prep.start(StartPath::Restore)?;
        let reset = sample(n, p.warmup, || {
            let inv = f.invoke_input(b"");
            if let Some(t) = inv.trap {
                return Err(anyhow!("{name} trapped: {t:?}"));
            }
            let t = Instant::now();
            snapshot::reset(&mut f, &prep.proto)?;
            Ok(t.elapsed())
        })?;
        // Dropping a Faaslet that has served a call: restore replaces a used
        // instance only together with this.
        let teardown = sample(n, p.warmup, || {
            let mut g = prep.start(StartPath::Restore)?;
            g.invoke_input(b"");
            let t = Instant::now();
            drop(g);
            Ok(t.elapsed())
        })?;
        for (phase, s) in [
            ("instantiate", inst),
            ("restore", restore),
            ("reset", reset),
            ("teardown", teardown),
        ] {
            table.push(vec![
                name.into(),
                phase.into(),
                s.n.to_string(),
                micros(s.median),
                micros(s.p99),
            ]);
        }
        let ordered = reset.median < restore.median && restore.median <= inst.median;
        checks.push(Check::new(
            &format!("{name} reset < restore <= instantiate"),
            ordered,
            format!(
                "medians {} / {} / {} us",
                micros(reset.median),
                micros(restore.median),
                micros(inst.median)
            ),
        ));
        medians.push((name, inst.median, restore.median));
    }
    for (name, inst, restore) in medians {
        match name {
            "heavy_init" => {
                let speedup = inst.as_secs_f64() / restore.as_secs_f64().max(1e-12);
                checks.push(Check::new(
                    "heavy_init restore speedup",
                    speedup >= HEAVY_SPEEDUP,
                    format!("{speedup:.1}x (need {HEAVY_SPEEDUP}x)"),
                ));
            }
            _ => checks.push(Check::new(
                "noop restore median",
                restore < NOOP_RESTORE_MAX,
                format!("{} us (limit {} us)", micros(restore), micros(NOOP_RESTORE_MAX)),
            )),
        }
    }
    Ok(Report {
        table,
        checks,
        plot: Some(COLDSTART_PLOT.into()),
    })
}

const COLDSTART_PLOT: &str = "\
set datafile separator ','
set style data histograms
set style fill solid
set logscale y
set ylabel 'median latency (us)'
plot 'coldstart.csv' using 4:xtic(sprintf('%s %s', strcol(1), strcol(2))) skip 1 title 'median'
";

#[derive(Debug, Clone, PartialEq)]
pub struct ChurnParams {
    pub function: String,
    /// Fixed target rates; when empty, each path is swept around its own
    /// measured capacity.
    pub rates: Vec<f64>,
    pub duration: Duration,
    pub workers: usize,
}

impl Default for ChurnParams {
    fn default() -> Self {
        ChurnParams {
            function: "noop".into(),
            rates: Vec::new(),
            duration: Duration::from_millis(300),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Fractions of a path's closed-loop capacity used as target rates.
pub const SWEEP: [f64; 9] = [0.1, 0.25, 0.5, 0.7, 0.85, 0.95, 1.05, 1.2, 1.5];
/// A rate is before the knee while the achieved rate keeps up with the
/// target and median latency stays within this factor of the lowest
/// rate's.
pub const KNEE_KEEP_UP: f64 = 0.95;
pub const KNEE_LATENCY_FACTOR: f64 = 2.0;
pub const CHURN_SPEEDUP: f64 = 3.0;
const MAX_ARRIVALS: usize = 500_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChurnPoint {
    pub path: StartPath,
    pub target: f64,
    pub achieved: f64,
    pub latency: Summary,
}

fn wait_until(t: Instant) {
    loop {
        let now = Instant::now();
        if now >= t {
            return;
        }
        let left = t - now;
        if left > Duration::from_micros(200) {
            std::thread::sleep(left - Duration::from_micros(150));
        } else {
            std::hint::spin_loop();
        }
    }
}

/// One cold start followed by a no-op call and teardown.
fn churn_once(prep: &Prepared, path: StartPath) -> Result<Instant> {
    let mut f = prep.start(path)?;
    let ready = Instant::now();
    let inv = f.invoke_input(b"");
    if let Some(t) = inv.trap {
        return Err(anyhow!("cold-started call trapped: {t:?}"));
    }
    drop(f);
    Ok(ready)
}

/// Back-to-back cold starts per second.
pub fn churn_capacity(prep: &Prepared, path: StartPath, workers: usize, span: Duration) -> Result<f64> {
    let t0 = Instant::now();
    let done = AtomicUsize::new(0);
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| -> Result<()> {
                    while t0.elapsed() < span {
                        churn_once(prep, path)?;
                        done.fetch_add(1, Ordering::Relaxed);
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("churn worker")?;
        }
        Ok(())
    })?;
    Ok(done.load(Ordering::Relaxed) as f64 / t0.elapsed().as_secs_f64())
}

/// Issues cold starts at a fixed `rate` for `span`. Latency runs from the
/// scheduled arrival to the Faaslet being ready, so it includes queueing.
pub fn churn_at(prep: &Prepared, path: StartPath, rate: f64, span: Duration, workers: usize) -> Result<ChurnPoint> {
    let n = ((rate * span.as_secs_f64()).ceil() as usize).clamp(1, MAX_ARRIVALS);
    let gap = Duration::from_secs_f64(1.0 / rate);
    let start = Instant::now() + Duration::from_millis(2);
    let next = AtomicUsize::new(0);
    let lat = Mutex::new(Vec::with_capacity(n));
    let last = Mutex::new(start);
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| -> Result<()> {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        let due = start + gap * i as u32;
                        wait_until(due);
                        let ready = churn_once(prep, path)?;
                        mine.push(ready - due);
                    }
                    let end = Instant::now();
                    let mut l = last.lock().expect("churn lock");
                    *l = (*l).max(end);
                    lat.lock().expect("churn lock").extend(mine);
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("churn worker")?;
        }
        Ok(())
    })?;
    let elapsed = (*last.lock().expect("churn lock") - start).as_secs_f64();
    // The first arrival is at `start`; n arrivals span (n - 1) gaps.
    let achieved = if n > 1 {
        (n - 1) as f64 / elapsed.max(1e-9)
    } else {
        rate
    };
    Ok(ChurnPoint {
        path,
        target: rate,
        achieved,
        latency: Summary::of(&lat.into_inner().expect("churn lock")),
    })
}

/// Highest achieved rate before the latency knee. The baseline is the
/// lowest median seen, since sparse arrivals also run on cold caches.
pub fn knee(points: &[ChurnPoint]) -> f64 {
    let Some(base) = points.iter().map(|p| p.latency.median).min() else {
        return 0.0;
    };
    points
        .iter()
        .filter(|p| p.achieved >= KNEE_KEEP_UP * p.target)
        .filter(|p| p.latency.median.as_secs_f64() <= KNEE_LATENCY_FACTOR * base.as_secs_f64())
        .map(|p| p.achieved)
        .fold(0.0, f64::max)
}

pub fn churn(p: &ChurnParams) -> Result<Report> {
    let prep = Prepared::new(&p.function)?;
    for path in StartPath::ALL {
        for _ in 0..DEFAULT_WARMUP {
            churn_once(&prep, path)?;
        }
    }
    let mut table = Table::new(
        "churn",
        &[
            "path",
            "target_per_s",
            "achieved_per_s",
            "median_us",
            "p99_us",
            "arrivals",
        ],
    );
    let mut knees = Vec::new();
    for path in StartPath::ALL {
        let rates: Vec<f64> = if p.rates.is_empty() {
            let cap = churn_capacity(&prep, path, p.workers, p.duration)?;
            SWEEP.iter().map(|f| f * cap).collect()
        } else {
            p.rates.clone()
        };
        let mut points = Vec::new();
        for r in rates {
            let pt = churn_at(&prep, path, r, p.duration, p.workers)?;
            table.push(vec![
                path.name().into(),
                format!("{:.0}", pt.target),
                format!("{:.0}", pt.achieved),
                micros(pt.latency.median),
                micros(pt.latency.p99),
                pt.latency.n.to_string(),
            ]);
            points.push(pt);
        }
        knees.push((path, knee(&points)));
    }
    let at = |want: StartPath| knees.iter().find(|(p, _)| *p == want).map_or(0.0, |k| k.1);
    let (full, inst, restore) = (at(StartPath::Full), at(StartPath::Instantiate), at(StartPath::Restore));
    let ratio = restore / full.max(1e-9);
    let checks = vec![Check::new(
        "restore vs full-instantiate churn",
        ratio >= CHURN_SPEEDUP,
        format!(
            "{ratio:.2}x (need {CHURN_SPEEDUP}x): knees full {full:.0}/s, restore {restore:.0}/s; \
             instantiate from a loaded module {inst:.0}/s ({:.2}x of restore)",
            inst / restore.max(1e-9)
        ),
    )];
    Ok(Report {
        table,
        checks,
        plot: Some(CHURN_PLOT.into()),
    })
}

const CHURN_PLOT: &str = "\
set datafile separator ','
set logscale xy
set xlabel 'achieved cold starts per second'
set ylabel 'median init latency (us)'
plot for [p in 'full instantiate restore'] 'churn.csv' \
using (strcol(1) eq p ? $3 : 1/0):4 skip 1 with linespoints title p
";

/// Runs the SGD guests in each mode on identical data and compares bytes,
/// billable memory and loss.
pub fn sgd(p: &SgdParams, modes: &[Mode]) -> Result<Report> {
    let ds = Dataset::generate(p.seed, p.features, p.examples, p.nnz);
    let reference = sgd::serial_reference(&ds, p.epochs, p.learning_rate);
    let ref_loss = ds.loss(&reference);
    let mut table = Table::new(
        "sgd",
        &[
            "mode",
            "workers",
            "epochs",
            "push_every",
            "examples",
            "features",
            "wall_s",
            "state_in",
            "state_out",
            "system_bytes",
            "wire_bytes",
            "billable_gb_s",
            "loss",
            "reference_loss",
            "accuracy",
        ],
    );
    let mut checks = vec![Check::new(
        "reference converges",
        sgd::converged(ref_loss),
        format!("loss {ref_loss:.4}"),
    )];
    let mut runs = Vec::new();
    for &mode in modes {
        let r = sgd::run(p, &ds, mode)?;
        table.push(vec![
            mode.name().into(),
            p.workers.to_string(),
            p.epochs.to_string(),
            p.push_every.to_string(),
            p.examples.to_string(),
            p.features.to_string(),
            format!("{:.3}", r.wall.as_secs_f64()),
            r.state_in.to_string(),
            r.state_out.to_string(),
            r.system_bytes.to_string(),
            r.wire_bytes.to_string(),
            format!("{:.6}", r.billable_gb_s),
            format!("{:.6}", r.loss),
            format!("{ref_loss:.6}"),
            format!("{:.4}", r.accuracy),
        ]);
        checks.push(Check::new(
            &format!("{} counters match wire", mode.name()),
            r.counters_match_wire(),
            format!("counted {} wire {}", r.state_bytes() + r.system_bytes, r.wire_bytes),
        ));
        checks.push(Check::new(
            &format!("{} converges", mode.name()),
            sgd::converged(r.loss),
            format!("loss {:.4} reference {ref_loss:.4}", r.loss),
        ));
        if p.workers == 1 {
            checks.push(Check::new(
                &format!("{} matches serial reference", mode.name()),
                r.weights == reference,
                format!("loss {:.6} reference {ref_loss:.6}", r.loss),
            ));
        }
        runs.push(r);
    }
    let find = |m: Mode| runs.iter().find(|r| r.mode == m);
    if let (Some(tt), Some(ds)) = (find(Mode::TwoTier), find(Mode::DataShipping)) {
        let ratio = tt.state_bytes() as f64 / ds.state_bytes().max(1) as f64;
        let detail = format!(
            "two-tier {} / data-shipping {} = {ratio:.3}",
            tt.state_bytes(),
            ds.state_bytes()
        );
        if p.workers > 1 {
            checks.push(Check::new(
                "two-tier bytes <= 50% of data-shipping",
                ratio <= 0.5,
                detail,
            ));
        } else {
            checks.push(Check::new("modes within 2x", (0.5..=2.0).contains(&ratio), detail));
        }
    }
    Ok(Report {
        table,
        checks,
        plot: Some(SGD_PLOT.into()),
    })
}

const SGD_PLOT: &str = "\
set datafile separator ','
set style data histograms
set style fill solid
set ylabel 'global-tier state bytes'
plot 'sgd.csv' using ($8+$9):xtic(1) skip 1 title 'state bytes'
";
