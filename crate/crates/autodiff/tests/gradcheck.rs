use fewshot_autodiff::check::{self, catalog};
use fewshot_autodiff::{grad, Tape};
use ndarray::arr0;

#[test]
fn every_operation_matches_finite_differences() {
    let outcomes = catalog::run(0x5eed, 20, 0).unwrap();
    let failing: Vec<_> = outcomes
        .iter()
        .filter(|o| !(o.worst_first_order < 1e-4))
        .collect();
    assert!(failing.is_empty(), "{failing:#?}");
}

#[test]
fn backward_passes_match_finite_differences() {
    let outcomes = catalog::run(0xbeef, 6, 6).unwrap();
    let failing: Vec<_> = outcomes
        .iter()
        .filter(|o| !(o.worst_second_order.unwrap() < 1e-4))
        .collect();
    assert!(failing.is_empty(), "{failing:#?}");
}

#[test]
fn catalog_covers_each_recorded_primitive() {
    let names: Vec<_> = catalog::entries()
        .into_iter()
        .filter(|e| e.primitive)
        .map(|e| e.name)
        .collect();
    assert_eq!(names.len(), 25);
}

#[test]
fn first_derivative_of_shifted_square() {
    let t = Tape::new();
    let theta = t.var(arr0(0.0).into_dyn());
    let loss = theta.offset(-1.0).square();
    let g = grad(&loss, &[theta], false).unwrap();
    assert_eq!(g[0].item(), -2.0);
}

#[test]
fn second_derivative_of_square() {
    let t = Tape::new();
    let theta = t.var(arr0(0.7).into_dyn());
    let g = grad(&theta.square(), &[theta.clone()], true).unwrap();
    let h = grad(&g[0], &[theta], false).unwrap();
    assert_eq!(h[0].item(), 2.0);
}

#[test]
fn unrelated_variable_gets_zero_gradient() {
    let t = Tape::new();
    let a = t.var(arr0(3.0).into_dyn());
    let b = t.var(arr0(5.0).into_dyn());
    let g = grad(&a.exp(), &[a, b], false).unwrap();
    assert!((g[0].item() - 3f64.exp()).abs() < 1e-12);
    assert_eq!(g[1].item(), 0.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let t = Tape::new();
    let a = t.var(ndarray::arr1(&[1.0, 2.0]).into_dyn());
    assert!(grad(&a, &[a.clone()], false).is_err());
}

#[test]
fn gradient_without_graph_is_a_constant() {
    let t = Tape::new();
    let a = t.var(arr0(2.0).into_dyn());
    let g = grad(&a.square(), &[a.clone()], false).unwrap();
    assert!(!g[0].requires_grad());
    assert!((check::relative_error(&[g[0].item()], &[4.0])) < 1e-15);
}
