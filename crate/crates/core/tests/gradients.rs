mod support;

use support::{gradient_suite, loss_gradients, GradInstance, GRAD_FLOOR, GRAD_TOL, LOSS_NAMES};

use apolab::numcore::max_relative_error;

#[test]
fn every_loss_matches_finite_differences() {
    for report in gradient_suite(20) {
        assert_eq!(report.instances, 20);
        assert!(
            report.worst_error <= GRAD_TOL,
            "{}: relative error {:.3e}",
            report.name,
            report.worst_error
        );
    }
}

#[test]
fn gradients_are_deterministic() {
    let inst = GradInstance::new(5);
    for name in LOSS_NAMES {
        let (_, a, _) = loss_gradients(name, &inst);
        let (_, b, _) = loss_gradients(name, &GradInstance::new(5));
        assert_eq!(a.values(), b.values(), "{name}");
    }
}

#[test]
fn instances_exercise_nonzero_gradients() {
    let inst = GradInstance::new(7);
    for name in LOSS_NAMES {
        let (loss, g, fd) = loss_gradients(name, &inst);
        assert!(g.norm() > 1e-6, "{name} has a vanishing gradient");
        assert!(max_relative_error(&g, &fd, GRAD_FLOOR * loss.abs().max(1.0)) <= GRAD_TOL);
    }
}
