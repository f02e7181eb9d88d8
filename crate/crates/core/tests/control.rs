use beadstring::control::{
    full_control, shape_control, velocity_control, verify_control, ControlError, FullControlOptions, SynthesisOptions,
};
use beadstring::model::{Profile, SampledFunction, StringSystem};
use beadstring::numerics::bump;

fn one_mass() -> StringSystem {
    StringSystem::free(1.0, &[(0.4, 1.0)]).unwrap()
}

fn target(s: &StringSystem, dx: f64) -> Profile {
    Profile::from_fn(s, dx, |_, x| bump(x, 0.7, 0.18, 6))
}

#[test]
fn velocity_control_reaches_its_target() {
    let s = one_mass();
    let syn = velocity_control(&s, &target(&s, 1e-3), 0.9, &SynthesisOptions::default()).unwrap();
    let r = verify_control(&s, &syn.control, None, Some(&target(&s, 5e-4)), 0.9, 5e-4).unwrap();
    assert!(r.relative_error < 1e-3, "{}", r.relative_error);
    assert!(r.w0_error.is_none());
}

#[test]
fn shape_control_is_causal() {
    // nothing may reach x > T before time T
    let s = one_mass();
    let syn = shape_control(&s, &target(&s, 1e-3), 0.9, &SynthesisOptions::default()).unwrap();
    assert!(syn.control.end() <= 0.9 + 1e-9);
    assert!(syn.compatibility.passed());
}

#[test]
fn target_beyond_the_front_is_refused() {
    let s = one_mass();
    let err = shape_control(&s, &target(&s, 1e-3), 0.5, &SynthesisOptions::default()).unwrap_err();
    assert!(matches!(err, ControlError::Support { .. }), "{err}");
    assert!(err.is_precondition());
}

#[test]
fn short_horizon_is_refused() {
    let s = one_mass();
    let z = Profile::zeros(&s, 1e-3);
    let err = full_control(&s, &z, &z, 2.0, &FullControlOptions::default()).unwrap_err();
    assert!(matches!(err, ControlError::Horizon { .. }), "{err}");
}

#[test]
fn rest_stays_at_rest() {
    let s = one_mass();
    let z = Profile::zeros(&s, 1e-3);
    let f = SampledFunction::time_signal(1.0, 1e-3, |_| 0.0);
    let r = verify_control(&s, &f, Some(&z), Some(&z), 1.0, 1e-3).unwrap();
    assert_eq!(r.relative_error, 0.0);
    assert!(r.displacement_compatibility.passed() && r.velocity_compatibility.passed());
}
