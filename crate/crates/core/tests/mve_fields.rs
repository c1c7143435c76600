mod common;

use std::collections::BTreeSet;

use common::rand_tensor;
use localmim::mve::{
    assemble_full_grid, attention_pair_count, default_counts, extract, parse_counts,
    sample_window_plan, AttentionScope, WindowCounts, WindowPlan, WindowSpec,
};
use localmim::vit::{sample_mask, sincos_2d, MaskPlan};
use localmim::{Tape, Tensor};

#[test]
fn default_plan_geometry() {
    let plan = sample_window_plan((14, 14), &default_counts(), 3).unwrap();
    assert_eq!(plan.specs.len(), 7);
    assert_eq!(plan.slots(), 279);
    let mut sizes: Vec<usize> = plan.specs.iter().map(|w| w.size).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![5, 5, 5, 5, 7, 7, 9]);
    assert_eq!(
        plan,
        sample_window_plan((14, 14), &default_counts(), 3).unwrap()
    );
    for w in &plan.specs {
        assert!(w.top_left.0 + w.size <= 14 && w.top_left.1 + w.size <= 14);
        let expected: Vec<usize> = (0..w.size)
            .flat_map(|r| (0..w.size).map(move |c| (w.top_left.0 + r) * 14 + w.top_left.1 + c))
            .collect();
        assert_eq!(w.token_indices, expected);
    }
}

#[test]
fn full_size_window_has_one_position() {
    let counts = WindowCounts::from([(14, 3)]);
    for seed in 0..5 {
        let plan = sample_window_plan((14, 14), &counts, seed).unwrap();
        assert!(plan.specs.iter().all(|w| w.top_left == (0, 0)));
    }
    assert!(sample_window_plan((8, 8), &WindowCounts::from([(9, 1)]), 0).is_err());
}

#[test]
fn plan_serializes_as_triples() {
    let plan = sample_window_plan((14, 14), &default_counts(), 8).unwrap();
    let back = WindowPlan::from_triples((14, 14), 8, &plan.triples()).unwrap();
    assert_eq!(back.specs, plan.specs);
    assert_eq!(parse_counts("5x4+7x2+9x1").unwrap(), default_counts());
}

#[test]
fn pair_counts() {
    let plan = sample_window_plan((14, 14), &default_counts(), 0).unwrap();
    assert_eq!(
        attention_pair_count(&AttentionScope::Global((14, 14))),
        38_416
    );
    assert_eq!(
        attention_pair_count(&AttentionScope::Windowed(&plan)),
        13_863
    );
    assert_eq!(
        attention_pair_count(&AttentionScope::Global((28, 28))),
        614_656
    );
    let one = WindowPlan::from_triples((1, 1), 0, &[(1, 0, 0)]).unwrap();
    assert_eq!(attention_pair_count(&AttentionScope::Windowed(&one)), 1);
    assert_eq!(attention_pair_count(&AttentionScope::Global((1, 1))), 1);
}

#[test]
fn assembly_without_mask_reorders_encoder_output() {
    let tape = Tape::<f64>::new();
    let enc = rand_tensor(&[9, 4], 1);
    let mask = MaskPlan::none(9);
    let token = tape.constant(Tensor::zeros(&[4]));
    let full = assemble_full_grid(
        tape.constant(enc.clone()),
        &mask,
        token,
        &sincos_2d(4, 3, 3),
    )
    .unwrap();
    assert_eq!(full.to_tensor(), enc);
}

#[test]
fn masked_slots_differ_only_by_position() {
    let tape = Tape::<f64>::new();
    let mask = sample_mask(9, 0.9, 4).unwrap();
    assert_eq!(mask.masked_indices.len(), 8);
    let pos = sincos_2d::<f64>(8, 3, 3);
    let token_value = rand_tensor(&[8], 2);
    let token = tape.constant(token_value.clone());
    let full =
        assemble_full_grid(tape.constant(rand_tensor(&[1, 8], 3)), &mask, token, &pos).unwrap();
    let full = full.to_tensor();
    for &m in &mask.masked_indices {
        for j in 0..8 {
            let expect = token_value.data()[j] + pos.data()[m * 8 + j];
            assert_eq!(full.data()[m * 8 + j], expect);
        }
    }
    let mut all: Vec<usize> = mask.visible_indices();
    all.extend(&mask.masked_indices);
    all.sort_unstable();
    assert_eq!(all, (0..9).collect::<Vec<_>>());
}

#[test]
fn assembly_rejects_count_mismatch() {
    let tape = Tape::<f64>::new();
    let mask = sample_mask(9, 0.5, 0).unwrap();
    let token = tape.constant(Tensor::zeros(&[4]));
    let bad = tape.constant(Tensor::zeros(&[6, 4]));
    assert!(assemble_full_grid(bad, &mask, token, &sincos_2d(4, 3, 3)).is_err());
}

#[test]
fn extract_is_a_local_gather() {
    let tape = Tape::<f64>::new();
    let grid = rand_tensor(&[25, 3], 5);
    let plan = WindowPlan::from_triples((5, 5), 0, &[(1, 2, 3), (2, 0, 0)]).unwrap();
    let mask = MaskPlan::none(25);
    let b = extract(tape.constant(grid.clone()), &plan, &mask).unwrap();
    assert_eq!(b.tokens[0].to_tensor().data(), &grid.data()[13 * 3..14 * 3]);

    let mut outside = grid.clone();
    for i in [4usize, 20, 24] {
        outside.data_mut()[i * 3] = 99.0;
    }
    let b2 = extract(tape.constant(outside), &plan, &mask).unwrap();
    for (x, y) in b.tokens.iter().zip(&b2.tokens) {
        assert_eq!(x.to_tensor(), y.to_tensor());
    }
}

#[test]
fn window_flags_match_set_intersection() {
    let mask = sample_mask(196, 0.6, 21).unwrap();
    let masked: BTreeSet<usize> = mask.masked_indices.iter().copied().collect();
    let tape = Tape::<f64>::new();
    let full = tape.constant(Tensor::zeros(&[196, 2]));
    for seed in 0..20 {
        let plan = sample_window_plan((14, 14), &default_counts(), seed).unwrap();
        let b = extract(full, &plan, &mask).unwrap();
        let mut oracle = 0;
        for (w, flags) in plan.specs.iter().zip(&b.masked) {
            let cells: BTreeSet<usize> = w.token_indices.iter().copied().collect();
            let inter = cells.intersection(&masked).count();
            assert_eq!(flags.iter().filter(|&&f| f).count(), inter);
            oracle += inter;
        }
        assert_eq!(b.masked_occurrences(), oracle);
    }
}

#[test]
fn windows_keep_global_positions() {
    let pos = sincos_2d::<f64>(16, 14, 14);
    let tape = Tape::<f64>::new();
    for seed in 0..50 {
        let plan = sample_window_plan((14, 14), &default_counts(), seed).unwrap();
        let b = extract(tape.constant(pos.clone()), &plan, &MaskPlan::none(196)).unwrap();
        for (w, (toks, coords)) in plan.specs.iter().zip(b.tokens.iter().zip(&b.coords)) {
            assert_eq!(coords, &w.coords());
            for (k, &(r, c)) in coords.iter().enumerate() {
                let row = &pos.data()[(r * 14 + c) * 16..(r * 14 + c + 1) * 16];
                assert_eq!(&toks.to_tensor().data()[k * 16..(k + 1) * 16], row);
            }
        }
    }
}

#[test]
fn scatter_back_reproduces_gathered_values() {
    let grid = rand_tensor(&[49, 2], 8);
    let tape = Tape::<f64>::new();
    let plan = sample_window_plan((7, 7), &WindowCounts::from([(3, 3), (4, 2)]), 1).unwrap();
    let b = extract(tape.constant(grid.clone()), &plan, &MaskPlan::none(49)).unwrap();
    let mut canvas = vec![f64::NAN; 98];
    for (w, t) in plan.specs.iter().zip(&b.tokens) {
        let t = t.to_tensor();
        for (k, &i) in w.token_indices.iter().enumerate() {
            canvas[i * 2..i * 2 + 2].copy_from_slice(&t.data()[k * 2..k * 2 + 2]);
        }
    }
    for (i, pair) in canvas.chunks(2).enumerate() {
        if !pair[0].is_nan() {
            assert_eq!(pair, &grid.data()[i * 2..i * 2 + 2]);
        }
    }
}

#[test]
fn single_cell_window() {
    let spec = WindowSpec::new(1, (2, 3), (5, 5)).unwrap();
    assert_eq!(spec.token_indices, vec![13]);
    assert!(WindowSpec::new(3, (3, 3), (5, 5)).is_err());
}
