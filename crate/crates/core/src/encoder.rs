//! Item/position embeddings and the recurrent sequence encoder.
//!
//! Parameters (names in the [`ParamStore`]):
//! `emb.item [|V|+1, d]` (row 0 is padding and stays zero), `emb.pos [n, d]`,
//! and the GRU weights `enc.w_ih [d, 3d_h]`, `enc.w_hh [d_h, 3d_h]`,
//! `enc.b_ih`, `enc.b_hh [3d_h]` with gate blocks ordered reset, update, candidate.

use crate::params::{Bound, ParamStore};
use crate::tensor::{RngStream, Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

pub fn init_embeddings<T: Scalar>(
    store: &mut ParamStore<T>,
    num_items: usize,
    n: usize,
    d: usize,
    rng: &mut RngStream,
) {
    let bound = 1.0 / (d as f64).sqrt();
    let mut items = Tensor::uniform(vec![num_items + 1, d], bound, rng);
    items.data_mut()[..d].fill(T::zero());
    store.insert("emb.item", items);
    store.init_uniform("emb.pos", &[n, d], bound, rng);
}

pub fn init_encoder<T: Scalar>(store: &mut ParamStore<T>, d: usize, d_h: usize, rng: &mut RngStream) {
    let bound = 1.0 / (d_h as f64).sqrt();
    store.init_uniform("enc.w_ih", &[d, 3 * d_h], bound, rng);
    store.init_uniform("enc.w_hh", &[d_h, 3 * d_h], bound, rng);
    store.init_uniform("enc.b_ih", &[3 * d_h], bound, rng);
    store.init_uniform("enc.b_hh", &[3 * d_h], bound, rng);
}

/// `out[b, i] = item_table[items[b, i]] + pos_table[i]` as `[B, n, d]`.
///
/// `items` is row-major `[B, n]`.
pub fn embed_sequence<T: Scalar>(tape: &mut Tape<T>, items: &[usize], n: usize, p: &Bound) -> Result<Var> {
    let table = p.get("emb.item")?;
    let pos = p.get("emb.pos")?;
    if n == 0 || !items.len().is_multiple_of(n) {
        return Err(Error::Config(format!(
            "{} item ids do not tile rows of {n}",
            items.len()
        )));
    }
    let d = tape.shape(table)[1];
    let e = tape.gather_rows(table, items)?;
    let e = tape.reshape(e, vec![items.len() / n, n, d])?;
    Ok(tape.add(e, pos)?)
}

#[derive(Debug, Clone, Copy)]
pub struct EncodedSequence {
    /// Per-step states `[B, n, d_h]`.
    pub s: Var,
    /// State at the final position, `[B, d_h]`.
    pub h_g: Var,
}

/// Single-layer GRU over positions left to right.
///
/// Padded positions (`mask[b * n + i] == false`) copy the previous state, so
/// any amount of left padding leaves the summary unchanged.
pub fn encode_sequence<T: Scalar>(tape: &mut Tape<T>, m: Var, mask: &[bool], p: &Bound) -> Result<EncodedSequence> {
    let (w_ih, w_hh) = (p.get("enc.w_ih")?, p.get("enc.w_hh")?);
    let (b_ih, b_hh) = (p.get("enc.b_ih")?, p.get("enc.b_hh")?);
    let s = tape.shape(m).to_vec();
    let (b, n) = (s[0], s[1]);
    let d_h = tape.shape(w_hh)[0];
    if mask.len() != b * n {
        return Err(Error::Config(format!("mask length {} != {b}x{n}", mask.len())));
    }
    let gi_all = tape.linear(m, w_ih, Some(b_ih))?;
    let mut h = tape.constant(Tensor::zeros(vec![b, d_h]));
    let mut states = Vec::with_capacity(n);
    for t in 0..n {
        let live: Vec<bool> = (0..b).map(|r| mask[r * n + t]).collect();
        if live.iter().any(|&l| l) {
            let gi = tape.select(gi_all, 1, t)?;
            let gh = tape.linear(h, w_hh, Some(b_hh))?;
            let gi_rz = tape.narrow(gi, 1, 0, 2 * d_h)?;
            let gh_rz = tape.narrow(gh, 1, 0, 2 * d_h)?;
            let rz = tape.add(gi_rz, gh_rz)?;
            let rz = tape.sigmoid(rz);
            let r = tape.narrow(rz, 1, 0, d_h)?;
            let z = tape.narrow(rz, 1, d_h, d_h)?;
            let gi_n = tape.narrow(gi, 1, 2 * d_h, d_h)?;
            let gh_n = tape.narrow(gh, 1, 2 * d_h, d_h)?;
            let rn = tape.mul(r, gh_n)?;
            let cand = tape.add(gi_n, rn)?;
            let cand = tape.tanh(cand);
            // h' = (1 - z)·cand + z·h
            let diff = tape.sub(h, cand)?;
            let zd = tape.mul(z, diff)?;
            let next = tape.add(cand, zd)?;
            h = if live.iter().all(|&l| l) {
                next
            } else {
                tape.where_rows(&live, next, h)?
            };
            if !tape.value(h).is_finite() {
                return Err(Error::Numeric(format!("encoder state non-finite at position {t}")));
            }
        }
        states.push(tape.reshape(h, vec![b, 1, d_h])?);
    }
    let s = tape.concat(&states, 1)?;
    Ok(EncodedSequence { s, h_g: h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pad_truncate;

    fn setup(num_items: usize, n: usize, d: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed);
        init_embeddings(&mut store, num_items, n, d, &mut rng);
        init_encoder(&mut store, d, 2 * d, &mut rng);
        store
    }

    fn run(store: &ParamStore<f64>, seqs: &[Vec<usize>], n: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut items = Vec::new();
        let mut mask = Vec::new();
        for s in seqs {
            let f = pad_truncate(s, n);
            items.extend(f.items);
            mask.extend(f.mask);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let m = embed_sequence(&mut tape, &items, n, &p).unwrap();
        let enc = encode_sequence(&mut tape, m, &mask, &p).unwrap();
        (
            tape.value(m).clone(),
            tape.value(enc.s).clone(),
            tape.value(enc.h_g).clone(),
        )
    }

    #[test]
    fn embedding_matches_index_and_add_loop() {
        let store = setup(9, 4, 3, 1);
        let seqs = vec![vec![1, 5, 9], vec![2, 3, 4, 7]];
        let (m, _, _) = run(&store, &seqs, 4);
        let items = store.get("emb.item").unwrap();
        let pos = store.get("emb.pos").unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let f = pad_truncate(s, 4);
            for i in 0..4 {
                for j in 0..3 {
                    let expect = items.at(&[f.items[i], j]) + pos.at(&[i, j]);
                    assert_eq!(m.at(&[b, i, j]), expect);
                }
            }
        }
    }

    #[test]
    fn all_pad_rows_equal_positions_and_single_item_adds() {
        let store = setup(5, 3, 2, 2);
        let (m, _, _) = run(&store, &[vec![], vec![4]], 3);
        let pos = store.get("emb.pos").unwrap();
        let items = store.get("emb.item").unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(m.at(&[0, i, j]), pos.at(&[i, j]));
            }
        }
        assert_eq!(m.at(&[1, 2, 1]), items.at(&[4, 1]) + pos.at(&[2, 1]));
    }

    #[test]
    fn out_of_range_item_is_an_index_error() {
        let store = setup(5, 2, 2, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        assert!(embed_sequence(&mut tape, &[1, 6], 2, &p).is_err());
    }

    #[test]
    fn zero_weights_and_inputs_stay_at_origin() {
        let mut store = setup(4, 3, 2, 4);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            store.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
        let (_, s, h) = run(&store, &[vec![1, 2, 3]], 3);
        assert!(s.data().iter().chain(h.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn shapes() {
        let store = setup(6, 4, 3, 5);
        let (_, s, h) = run(&store, &[vec![1, 2], vec![3, 4, 5, 6]], 4);
        assert_eq!(s.shape(), &[2, 4, 6]);
        assert_eq!(h.shape(), &[2, 6]);
    }

    #[test]
    fn perturbing_a_pad_embedding_leaves_states_unchanged() {
        let store = setup(6, 5, 3, 6);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let items = [0, 0, 2, 4, 6];
        let mask = [false, false, true, true, true];
        let m = embed_sequence(&mut tape, &items, 5, &p).unwrap();
        let base = encode_sequence(&mut tape, m, &mask, &p).unwrap();
        let mut bumped = tape.value(m).clone();
        for j in 0..3 {
            bumped.data_mut()[3 + j] += 0.37 * (j as f64 + 1.0);
        }
        let m2 = tape.constant(bumped);
        let moved = encode_sequence(&mut tape, m2, &mask, &p).unwrap();
        assert!(tape.value(base.s).bitwise_eq(tape.value(moved.s)));
        assert!(tape.value(base.h_g).bitwise_eq(tape.value(moved.h_g)));
    }

    #[test]
    fn states_are_causal() {
        let store = setup(8, 5, 3, 7);
        let (_, a, _) = run(&store, &[vec![1, 2, 3, 4, 5]], 5);
        let (_, b, _) = run(&store, &[vec![1, 2, 3, 8, 7]], 5);
        for i in 0..3 {
            for j in 0..6 {
                assert_eq!(a.at(&[0, i, j]).to_bits(), b.at(&[0, i, j]).to_bits());
            }
        }
        assert_ne!(a.at(&[0, 4, 0]), b.at(&[0, 4, 0]));
    }

    #[test]
    fn summary_is_invariant_to_left_padding() {
        let seq = vec![3, 1, 4, 1, 5];
        let mut short = setup(6, 5, 3, 8);
        let long = {
            let mut s = setup(6, 9, 3, 8);
            // Share every weight except the positional table, which differs in size.
            for (k, v) in short.iter() {
                if k != "emb.pos" {
                    s.insert(k.clone(), v.clone());
                }
            }
            s
        };
        // Zero positions so both layouts see identical inputs at real steps.
        short.get_mut("emb.pos").unwrap().data_mut().fill(0.0);
        let mut long = long;
        long.get_mut("emb.pos").unwrap().data_mut().fill(0.0);
        let (_, _, h5) = run(&short, std::slice::from_ref(&seq), 5);
        let (_, _, h9) = run(&long, &[seq, vec![2, 2, 2, 2, 2, 2, 2, 2, 2]], 9);
        for j in 0..6 {
            assert_eq!(h5.at(&[0, j]).to_bits(), h9.at(&[0, j]).to_bits());
        }
    }
}
