mod common;

use common::*;
use paraknow_core::extract::SubmatrixStrategy;
use paraknow_core::heatmap::{build_heatmap, export_heatmap};
use paraknow_core::sensitivity::SensitivityMap;
use paraknow_core::tinylm::{ParamName, Role};

#[test]
fn normalized_values_lie_in_unit_interval_and_rows_follow_layers() {
    let fx = fixture(SubmatrixStrategy::Contiguous, &default_roles());
    let h = build_heatmap(&fx.smap).unwrap();
    assert_eq!(h.mean_normalized.len(), teacher_cfg().num_layers);
    for row in &h.mean_normalized {
        assert_eq!(row.len(), 7);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    for (l, row) in h.raw_sums.iter().enumerate() {
        for (r, &v) in h.roles.iter().zip(row) {
            let want = fx.smap.matrix(&ParamName::layer(l, *r)).unwrap().sum();
            assert_eq!(v, want);
        }
    }
}

#[test]
fn constant_matrices_map_to_zero() {
    let fx = fixture(SubmatrixStrategy::Contiguous, &default_roles());
    let mut scores = fx.smap.scores().clone();
    for v in scores.get_mut(&ParamName::layer(1, Role::AttnWv)).unwrap().as_mut_slice() {
        *v = 0.75;
    }
    let h = build_heatmap(&SensitivityMap::new(scores, 1).unwrap()).unwrap();
    let col = h.roles.iter().position(|&r| r == Role::AttnWv).unwrap();
    assert_eq!(h.mean_normalized[1][col], 0.0);
}

#[test]
fn exported_csvs() {
    let fx = fixture(SubmatrixStrategy::Contiguous, &default_roles());
    let dir = tempfile::tempdir().unwrap();
    let (norm, sums) = export_heatmap(&fx.smap, &dir.path().join("h.csv")).unwrap();
    assert_eq!(sums.file_name().unwrap(), "h.sums.csv");
    for path in [norm, sums] {
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "layer,attn.wq,attn.wk,attn.wv,attn.wo,ffn.w1,ffn.w2,ffn.w3"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), teacher_cfg().num_layers);
        for (l, row) in rows.iter().enumerate() {
            let cells: Vec<&str> = row.split(',').collect();
            assert_eq!(cells[0], l.to_string());
            assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap() >= 0.0));
        }
    }
}
