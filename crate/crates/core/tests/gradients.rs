//! Reverse-mode gradients against central differences at 64-bit.

mod common;

use common::grad_cases::{self, COORDS, TOLERANCE};

fn run(case: grad_cases::Case, name: &str) {
    let report = case().unwrap();
    eprintln!("{name}: worst relative error {:.3e} over {} coordinates at {:?}", report.worst, report.coords, report.at);
    assert!(report.coords >= COORDS);
    assert!(report.worst < TOLERANCE, "{name}: {report:?}");
}

macro_rules! gradient_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                run(grad_cases::$name, stringify!($name));
            }
        )*
    };
}

gradient_tests!(
    elementwise,
    conv,
    pool,
    upsample,
    grid_sample_case,
    ssim_case,
    smoothness,
    attention,
    se3,
    view_synthesis,
    total_loss_case,
    diffnet_forward,
);

