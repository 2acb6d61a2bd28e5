use minitune_core::autograd::ops::{self, Compare};
use minitune_core::autograd::Tensor;
use minitune_core::fd_suite::{cases, run_case};

const SEEDS: u64 = 100;

fn run_group(group: &str) {
    let selected: Vec<_> = cases().into_iter().filter(|c| c.group == group).collect();
    assert!(!selected.is_empty(), "no cases in {group}");
    for case in &selected {
        let out = run_case(case, 0..SEEDS).unwrap();
        assert!(out.passed(), "{}: failed seeds {:?}, worst {:?}", out.name, out.failed_seeds, out.report.worst);
        eprintln!("{}: {} entries, max rel err {:.2e}", out.name, out.report.entries_checked, out.report.max_rel_error);
    }
}

#[test]
fn elementwise() {
    run_group("elementwise");
}

#[test]
fn reductions() {
    run_group("reductions");
}

#[test]
fn matrix_products() {
    run_group("matrix_products");
}

#[test]
fn layout_and_indexing() {
    run_group("layout");
}

#[test]
fn attention_norm_rope_lora() {
    run_group("modules");
}

#[test]
fn losses() {
    run_group("objectives");
}

#[test]
fn suite_covers_every_group() {
    let mut groups: Vec<&str> = cases().iter().map(|c| c.group).collect();
    groups.dedup();
    assert_eq!(groups, ["elementwise", "reductions", "matrix_products", "layout", "modules", "objectives"]);
}

#[test]
fn comparison_masks_are_constants() {
    let x = Tensor::new(&[4], vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
    assert_eq!(ops::compare(&x, Compare::Gt, 0.0).to_vec(), vec![0.0, 0.0, 1.0, 1.0]);
    assert_eq!(ops::compare(&x, Compare::Lt, 0.0).to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(ops::compare(&x, Compare::Eq, 1.0).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
}
