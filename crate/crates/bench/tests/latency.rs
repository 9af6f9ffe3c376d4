use binconv_bench::factory::{shortcut_study, single_conv, ShortcutVariant, SingleConv};
use binconv_bench::random_inputs;
use binconv_core::converter::{convert, ConvertOptions};
use binconv_core::graph::{OpKind, PadValue};
use binconv_core::runtime::{Category, ExecutionPlan};

fn plan(g: &binconv_core::graph::Graph) -> ExecutionPlan {
    ExecutionPlan::new(convert(g, &ConvertOptions::default()).unwrap().graph).unwrap()
}

#[test]
fn single_conv_profile_is_all_convolution() {
    for binary in [true, false] {
        let spec = SingleConv {
            hw: 16,
            in_channels: 64,
            out_channels: 64,
            kernel: 3,
            stride: 1,
            binary,
            pad: PadValue::One,
        };
        let p = plan(&single_conv(spec, 0).unwrap());
        let profile = p.profile(&random_inputs(&p, 0), 5, 1, 1).unwrap();
        let conv = profile
            .records
            .iter()
            .find(|r| matches!(r.kind, OpKind::BConv2D | OpKind::Conv2D))
            .unwrap();
        let total: f64 = profile.records.iter().map(|r| r.pct).sum();
        assert!((total - 100.0).abs() < 0.5);
        if binary {
            // A Quantize precedes the convolution.
            assert_eq!(profile.records.len(), 2);
            assert!(conv.pct > 50.0, "{}", conv.pct);
            let split =
                profile.category_pct(Category::BConvAccumulate) + profile.category_pct(Category::BConvTransform);
            assert!((split - conv.pct).abs() < 1e-6);
        } else {
            assert_eq!(profile.records.len(), 1);
            assert!((conv.pct - 100.0).abs() < 1e-9);
        }
    }
}

#[test]
fn shortcuts_cost_latency() {
    let profile = |v: ShortcutVariant| {
        let p = plan(&shortcut_study(v, 96, 10, 0).unwrap());
        let x = random_inputs(&p, 0);
        p.profile(&x, 7, 2, 1).unwrap()
    };
    let b = profile(ShortcutVariant::B);
    let c = profile(ShortcutVariant::C);
    assert!(
        b.end_to_end_us >= c.end_to_end_us,
        "variant B {:.1} us faster than variant C {:.1} us",
        b.end_to_end_us,
        c.end_to_end_us
    );

    // The extra work is the shortcut Adds and the Quantize ops they force.
    let count = |p: &binconv_core::runtime::Profile, k: OpKind| p.records.iter().filter(|r| r.kind == k).count();
    assert_eq!(count(&b, OpKind::Add), 5);
    assert_eq!(count(&c, OpKind::Add), 0);
    assert!(count(&b, OpKind::Quantize) > count(&c, OpKind::Quantize));
    assert_eq!(count(&b, OpKind::BConv2D), count(&c, OpKind::BConv2D));
    assert!(b.category_pct(Category::Add) > 0.0);
}
