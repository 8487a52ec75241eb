mod common;

use rand::Rng;
use squant::io::container::{ActQuant, Codes, RecordBody, SparseQuantRecord};
use squant::io::{load_packed, save_packed, PackedModel, Record};
use squant::kernels::{compute_mask, compute_threshold, encode_nonzero, make_quant_params};
use squant::{Error, SparsityMask, Tensor};

const HEADER: usize = 4 + 2 + 4;

fn fixed_part(name: &str, rank: usize) -> usize {
    2 + name.len() + 1 + 4 * rank + 1 + 1 + 4 + 4
}

/// A sparse k-bit record for `w` at threshold sigma 0.
fn sparse(name: &str, w: &Tensor, k: u32) -> Record {
    let t = compute_threshold(w, 0.0).unwrap();
    let mask = compute_mask(w, t);
    let qp = make_quant_params(w, &mask, t, k).unwrap();
    let codes = encode_nonzero(w.data(), &mask, &qp).unwrap();
    Record {
        name: name.into(),
        shape: w.shape().to_vec(),
        body: RecordBody::Sparse(SparseQuantRecord {
            k,
            min: qp.min,
            max: qp.max,
            mask,
            codes: Codes::Grid(codes),
        }),
        act: None,
    }
}

fn sample_model() -> PackedModel {
    let mut r = common::rng(31);
    let w1 = Tensor::randn(&[8, 3, 3, 3], 0.3, &mut r);
    let w2 = Tensor::randn(&[10, 37], 0.3, &mut r);
    let mut rec2 = sparse("fc.weight", &w2, 3);
    rec2.act = Some(ActQuant {
        alpha: 2.75,
        k_act: 4,
    });
    PackedModel {
        records: vec![
            Record::full("conv1.weight", &w1),
            sparse(
                "conv2.weight",
                &Tensor::randn(&[4, 8, 2, 2], 0.3, &mut r),
                4,
            ),
            Record::full("bn.gamma", &Tensor::from_vec(vec![1.0, -0.5, 0.25])),
            rec2,
        ],
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let m = sample_model();
    let bytes = save_packed(&m).unwrap();
    let back = load_packed(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(save_packed(&back).unwrap(), bytes);
    for rec in &m.records {
        let a = rec.decode().unwrap();
        let b = back.get(&rec.name).unwrap().decode().unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn header_is_little_endian() {
    let bytes = save_packed(&sample_model()).unwrap();
    assert_eq!(&bytes[..4], b"SQNT");
    assert_eq!(&bytes[4..6], &[1, 0]);
    assert_eq!(&bytes[6..10], &[4, 0, 0, 0]);
}

#[test]
fn dense_layer_payload_size() {
    // 1024 weights, half of them pruned, 4-bit codes
    let n = 1024usize;
    let mut r = common::rng(32);
    let mut mask = SparsityMask::ones(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n {
        idx.swap(i, r.random_range(i..n));
    }
    for &i in &idx[..n / 2] {
        mask.set(i, false);
    }
    let codes = (0..n / 2)
        .map(|i| squant::GridCode {
            negative: i % 3 == 0,
            level: (i % 8) as u32,
        })
        .collect();
    let name = "fc.weight";
    let m = PackedModel {
        records: vec![Record {
            name: name.into(),
            shape: vec![32, 32],
            body: RecordBody::Sparse(SparseQuantRecord {
                k: 4,
                min: 0.1,
                max: 0.9,
                mask,
                codes: Codes::Grid(codes),
            }),
            act: None,
        }],
    };
    let bytes = save_packed(&m).unwrap();
    let payload = n / 8 + (n / 2) * 4 / 8;
    assert_eq!(payload, 128 + 256);
    assert_eq!(bytes.len(), HEADER + fixed_part(name, 2) + 4 + payload);
}

#[test]
fn flipped_mask_bit_is_corruption() {
    let mut r = common::rng(33);
    let w = Tensor::randn(&[6, 10], 0.5, &mut r);
    let name = "w.weight";
    let m = PackedModel {
        records: vec![sparse(name, &w, 4)],
    };
    let bytes = save_packed(&m).unwrap();
    let mask_start = HEADER + fixed_part(name, 2);
    let mask_len = 60usize.div_ceil(8);
    // every data bit of the mask (the final byte holds 4 padding bits)
    for bit in 0..60 {
        let mut bad = bytes.clone();
        bad[mask_start + bit / 8] ^= 0x80 >> (bit % 8);
        assert!(
            matches!(load_packed(&bad), Err(Error::Corruption(_))),
            "flip of mask bit {bit} went unnoticed"
        );
    }
    // padding bits must be zero too
    let mut bad = bytes.clone();
    bad[mask_start + mask_len - 1] ^= 0x01;
    assert!(matches!(load_packed(&bad), Err(Error::Corruption(_))));
}

#[test]
fn every_truncation_is_a_format_error() {
    let bytes = save_packed(&sample_model()).unwrap();
    for cut in 0..bytes.len() {
        match load_packed(&bytes[..cut]) {
            Err(Error::Format(_)) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(load_packed(&extra), Err(Error::Format(_))));
}

#[test]
fn bad_magic_version_and_flags() {
    let bytes = save_packed(&sample_model()).unwrap();
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(load_packed(&b), Err(Error::Format(_))));
    let mut b = bytes.clone();
    b[4] = 2;
    assert!(matches!(load_packed(&b), Err(Error::Format(_))));
    // flags of the first record: full precision, rank 4
    let flags_at = HEADER + 2 + "conv1.weight".len() + 1 + 16;
    assert_eq!(bytes[flags_at], 0b0000_0001);
    let mut b = bytes.clone();
    b[flags_at] |= 0b0000_0100;
    assert!(matches!(load_packed(&b), Err(Error::Format(_))));
}

#[test]
fn exempt_records_round_trip_exactly() {
    let data = vec![f32::MIN_POSITIVE, -0.0, 1e-38, 3.5, -7.25e12];
    let m = PackedModel {
        records: vec![Record::full("x", &Tensor::from_vec(data.clone()))],
    };
    let back = load_packed(&save_packed(&m).unwrap()).unwrap();
    match &back.records[0].body {
        RecordBody::Full(d) => {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(d), bits(&data));
        }
        _ => panic!("expected a full-precision record"),
    }
}
