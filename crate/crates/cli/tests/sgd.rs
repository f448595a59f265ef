use faaslite_cli::bench;
use faaslite_cli::sgd::{self, converged, serial_reference, Dataset, Mode, SgdParams};

fn params(workers: u32, epochs: u32, push_every: u32) -> SgdParams {
    SgdParams {
        features: 50,
        examples: 1000,
        nnz: 8,
        workers,
        epochs,
        push_every,
        ..SgdParams::default()
    }
}

fn dataset(p: &SgdParams) -> Dataset {
    Dataset::generate(p.seed, p.features, p.examples, p.nnz)
}

#[test]
fn four_workers_converge() {
    let p = params(4, 5, 10);
    let ds = dataset(&p);
    let run = sgd::run(&p, &ds, Mode::TwoTier).unwrap();
    let reference = ds.loss(&serial_reference(&ds, p.epochs, p.learning_rate));
    assert!(converged(reference), "reference {reference}");
    assert!(converged(run.loss), "loss {} reference {reference}", run.loss);
    assert!(run.counters_match_wire(), "{run:?}");
    assert!(run.state_in > 0 && run.state_out > 0);
}

#[test]
fn one_worker_matches_the_serial_reference_exactly() {
    let p = params(1, 3, 10);
    let ds = dataset(&p);
    let expected = serial_reference(&ds, p.epochs, p.learning_rate);
    for mode in [Mode::TwoTier, Mode::DataShipping] {
        let run = sgd::run(&p, &ds, mode).unwrap();
        assert_eq!(run.weights, expected, "{}", mode.name());
    }
}

#[test]
fn single_worker_runs_are_reproducible() {
    let p = params(1, 2, 10);
    let ds = dataset(&p);
    let a = sgd::run(&p, &ds, Mode::TwoTier).unwrap();
    let b = sgd::run(&p, &ds, Mode::TwoTier).unwrap();
    // System traffic carries random call ids, so its size may differ.
    assert_eq!(
        (a.state_in, a.state_out, &a.weights),
        (b.state_in, b.state_out, &b.weights)
    );
}

#[test]
fn pushing_less_often_moves_fewer_bytes() {
    let ds = dataset(&params(4, 2, 1));
    let every = sgd::run(&params(4, 2, 1), &ds, Mode::TwoTier).unwrap();
    let rarely = sgd::run(&params(4, 2, 100), &ds, Mode::TwoTier).unwrap();
    assert!(
        rarely.state_bytes() < every.state_bytes(),
        "P=100 {} vs P=1 {}",
        rarely.state_bytes(),
        every.state_bytes()
    );
    assert!(converged(rarely.loss) && converged(every.loss));
}

#[test]
fn bench_reports_both_modes() {
    let p = params(4, 3, 10);
    let report = bench::sgd(&p, &[Mode::TwoTier, Mode::DataShipping]).unwrap();
    assert_eq!(report.table.column("mode"), ["two-tier", "data-shipping"]);
    let ratio = report
        .check("two-tier bytes <= 50% of data-shipping")
        .expect("ratio check");
    assert!(ratio.pass, "{ratio}");
    assert!(report.passed(), "{:?}", report.checks);
    let one = bench::sgd(&params(1, 2, 10), &[Mode::TwoTier, Mode::DataShipping]).unwrap();
    assert!(one.check("modes within 2x").expect("sanity check").pass);
}
