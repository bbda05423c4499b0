use proptest::prelude::*;
use saqlab_core::costmodel::{
    constraint_penalty, format_bops, full_precision_bops, layer_macs, total_bops, BopUnit, Budget,
};
use saqlab_core::netlib::{miniconv_spec, resnet18_spec, resnet20_spec, BitwidthConfig, LayerKind};

#[test]
fn layer_mac_examples() {
    let spec = resnet20_spec(100, true).unwrap();
    let weighted: Vec<_> = spec.weighted_layers().map(|(_, l)| l).collect();
    let first = weighted[0];
    assert!(matches!(first.kind, LayerKind::Conv { in_channels: 3, out_channels: 16, kernel: 3, .. }));
    assert_eq!(layer_macs(first).unwrap(), 442_368);
    let last = weighted.last().unwrap();
    assert!(matches!(last.kind, LayerKind::Linear { in_features: 64, out_features: 100, .. }));
    assert_eq!(layer_macs(last).unwrap(), 6_400);
    let relu = spec.layers.iter().find(|l| l.kind == LayerKind::Relu).unwrap();
    assert!(layer_macs(relu).is_err());
}

#[test]
fn resnet20_mac_total() {
    let spec = resnet20_spec(100, true).unwrap();
    let report = total_bops(&spec, &BitwidthConfig::uniform(4, 20)).unwrap();
    assert_eq!(report.total_macs, 40_818_944);
    assert_eq!(report.full_precision_bops, 40_818_944 * 32 * 32);
    assert_eq!(report.total_bops, report.layers.iter().map(|l| l.bops).sum::<u64>());
}

#[test]
fn reference_table_renderings() {
    let r20 = resnet20_spec(100, true).unwrap();
    let r18 = resnet18_spec(1000, true).unwrap();
    let n20 = r20.searchable_layers().len();
    let n18 = r18.searchable_layers().len();
    let m = BopUnit::Mega;
    let g = BopUnit::Giga;
    assert_eq!(format_bops(full_precision_bops(&r20).unwrap(), m), "41798.6M");
    assert_eq!(format_bops(total_bops(&r20, &BitwidthConfig::uniform(4, n20)).unwrap().total_bops, m), "674.6M");
    assert_eq!(format_bops(total_bops(&r20, &BitwidthConfig::uniform(3, n20)).unwrap().total_bops, m), "392.1M");
    assert_eq!(format_bops(full_precision_bops(&r18).unwrap(), g), "1857.6G");
    assert_eq!(format_bops(total_bops(&r18, &BitwidthConfig::uniform(4, n18)).unwrap().total_bops, g), "34.7G");
    assert_eq!(format_bops(total_bops(&r18, &BitwidthConfig::uniform(2, n18)).unwrap().total_bops, g), "14.4G");
}

#[test]
fn miniconv_normalized_cost_range() {
    let spec = miniconv_spec(&[1, 8, 8], 4, true).unwrap();
    let norm = |b: u8| total_bops(&spec, &BitwidthConfig::uniform(b, 4)).unwrap().normalized();
    assert!((norm(2) - 0.0068).abs() < 5e-5, "{}", norm(2));
    assert!((norm(4) - 0.018).abs() < 5e-4, "{}", norm(4));
    assert!((norm(5) - 0.0263).abs() < 5e-5, "{}", norm(5));
}

#[test]
fn penalty_examples() {
    assert_eq!(constraint_penalty(0.016, 0.016, 1e5).unwrap(), 0.0);
    assert_eq!(constraint_penalty(0.5, 0.016, 0.0).unwrap(), 0.0);
    assert!((constraint_penalty(0.02, 0.016, 1e-4).unwrap() - 1.6e-9).abs() < 1e-22);
    assert!(constraint_penalty(0.02, 0.016, -1.0).is_err());
}

#[test]
fn config_length_mismatch_is_an_error() {
    let spec = resnet20_spec(10, true).unwrap();
    assert!(total_bops(&spec, &BitwidthConfig::uniform(4, 19)).is_err());
}

#[test]
fn budget_fraction_bounds() {
    let spec = miniconv_spec(&[1, 8, 8], 4, true).unwrap();
    let fp = full_precision_bops(&spec).unwrap();
    assert_eq!(Budget::Fraction(1.0).bops(&spec).unwrap(), fp);
    assert!(Budget::Fraction(0.0).bops(&spec).is_err());
    assert!(Budget::Fraction(1.5).bops(&spec).is_err());
    assert_eq!(Budget::Absolute(7).bops(&spec).unwrap(), 7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn raising_a_bitwidth_never_lowers_cost(
        bits in prop::collection::vec(2u8..=8, 20),
        layer in 0usize..20,
        raise in 1u8..8,
    ) {
        let spec = resnet20_spec(100, true).unwrap();
        let base = total_bops(&spec, &BitwidthConfig::new(bits.clone())).unwrap();
        let mut higher = bits.clone();
        higher[layer] = (higher[layer] + raise).min(16);
        let up = total_bops(&spec, &BitwidthConfig::new(higher)).unwrap();
        prop_assert!(up.total_bops >= base.total_bops);
        prop_assert!(base.compression_ratio() > 1.0);
    }
}
