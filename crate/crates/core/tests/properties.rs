use proptest::prelude::*;
use sws_core::geometry::{
    box_pixels, centroid_2d, centroid_3d, make_bin_spec, relative_position, BBox, Centroid, DepthMap,
    SUPPORTED_BIN_COUNTS,
};
use sws_core::patches::{axis_spans, extract_pyramid, pyramid_regions, Image, PyramidConfig};

fn centroid(d: usize) -> impl Strategy<Value = Centroid<f64>> {
    prop::collection::vec(0.0f64..=1.0, d).prop_map(|coords| Centroid { coords })
}

fn bbox() -> impl Strategy<Value = BBox<f64>> {
    (0.0f64..0.9, 0.0f64..0.9, 0.02f64..0.5, 0.02f64..0.5)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
}

proptest! {
    #[test]
    fn relative_position_is_antisymmetric((a, b) in (2usize..=3).prop_flat_map(|d| (centroid(d), centroid(d)))) {
        let ab = relative_position(&a, &b).unwrap();
        let ba = relative_position(&b, &a).unwrap();
        for (x, y) in ab.delta.iter().zip(&ba.delta) {
            prop_assert_eq!(x + y, 0.0);
            prop_assert!((-1.0..=1.0).contains(x));
        }
        let aa = relative_position(&a, &a).unwrap();
        prop_assert!(aa.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantize_partitions_and_keeps_sign(v in -1.0f64..=1.0, ci in 0usize..4) {
        let spec = make_bin_spec(1.5, SUPPORTED_BIN_COUNTS[ci]).unwrap();
        let c = spec.quantize(v).unwrap();
        let last = c + 1 == spec.num_classes;
        prop_assert!(spec.edges[c] <= v && (v < spec.edges[c + 1] || (last && v <= 1.0)) || spec.num_classes == 3 && c == 1);
        if v.abs() > spec.zero_bin_width() {
            let m = spec.dequantize(c).unwrap();
            prop_assert_eq!(m > 0.0, v > 0.0);
        }
    }

    #[test]
    fn mean_depth_within_box_extremes(b in bbox(), seed in any::<u64>()) {
        let (h, w) = (23, 31);
        let mut state = seed | 1;
        let values: Vec<f64> = (0..h * w).map(|_| {
            state ^= state << 13; state ^= state >> 7; state ^= state << 17;
            (state % 1000) as f64 / 1000.0
        }).collect();
        let mut map = DepthMap::new(h, w, values).unwrap();
        map.normalized = true;
        let z = centroid_3d(&b, &map).unwrap().coords[2];
        let ((r0, r1), (c0, c1)) = box_pixels(&b, h, w).unwrap();
        let inside: Vec<f64> = (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| (r, c))).map(|(r, c)| map.get(r, c)).collect();
        let lo = inside.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = inside.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= z && z <= hi);
        let c2 = centroid_2d(&b);
        prop_assert_eq!(&c2.coords[..], &centroid_3d(&b, &map).unwrap().coords[..2]);
    }

    #[test]
    fn patch_grids_cover_every_pixel(len in 4usize..200, g in 1usize..8, half in any::<bool>()) {
        let overlap = if half { 0.5 } else { 0.0 };
        prop_assume!(len >= 2 * g);
        let spans = axis_spans(len, g, overlap).unwrap();
        prop_assert_eq!(spans.len(), g);
        prop_assert_eq!(spans[0].0, 0);
        prop_assert_eq!(spans[g - 1].0 + spans[g - 1].1, len);
        for w in spans.windows(2) {
            prop_assert!(w[1].0 <= w[0].0 + w[0].1, "gap between {:?}", w);
        }
    }

    #[test]
    fn patch_count_ignores_image_size(h in 16usize..80, w in 16usize..80) {
        let cfg = PyramidConfig::default();
        prop_assert_eq!(pyramid_regions(h, w, &cfg).unwrap().len(), 84);
    }
}

#[test]
fn bin_suite_exhaustive() {
    for &c in &SUPPORTED_BIN_COUNTS {
        let spec = make_bin_spec(1.5, c).unwrap();
        assert_eq!(spec.edges[0], -1.0);
        assert_eq!(spec.edges[c], 1.0);
        assert!((spec.widths.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        for k in 0..c {
            assert_eq!(spec.quantize(spec.dequantize(k).unwrap()).unwrap(), k);
        }
        let n = 100_000;
        let mut prev = 0;
        for i in 0..=n {
            let v = -1.0 + 2.0 * i as f64 / n as f64;
            let k = spec.quantize(v).unwrap();
            assert!(k >= prev, "classes must be monotone in v");
            prev = k;
        }
    }
}

#[test]
fn locality_of_patches() {
    let cfg = PyramidConfig {
        patch_side: 4,
        ..Default::default()
    };
    let base = Image::new(1, 16, 16, (0..256).map(|v| v as f32 / 256.0).collect()).unwrap();
    let a = extract_pyramid(&base, &cfg).unwrap();
    let mut changed = base.clone();
    changed.data[15 * 16 + 15] = 9.0;
    let b = extract_pyramid(&changed, &cfg).unwrap();
    for (p, r) in a.regions.iter().enumerate() {
        let touches = r.y0 + r.h > 15 && r.x0 + r.w > 15;
        if !touches {
            assert_eq!(a.row(p), b.row(p), "patch {p} changed");
        }
    }
}
