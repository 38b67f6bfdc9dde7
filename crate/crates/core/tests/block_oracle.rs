//! One block written out again with plain loops, compared against the tape
//! implementation, plus stack composition checks.

use deltamil::block::{block_forward, stack_forward, BlockConfig, BlockParams};
use deltamil::locality::Coord;
use deltamil::NumArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn mm(x: &Mat, w: &NumArray) -> Mat {
    let (k, n) = (w.rows(), w.cols());
    x.iter()
        .map(|row| (0..n).map(|j| (0..k).map(|i| row[i] * w.data()[i * n + j]).sum()).collect())
        .collect()
}

fn add_bias(x: &mut Mat, b: &NumArray) {
    for row in x.iter_mut() {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rms(x: &Mat, g: &NumArray, eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
            r.iter().zip(g.data()).map(|(v, gg)| v / (ms + eps).sqrt() * gg).collect()
        })
        .collect()
}

fn causal(x: &Mat, k: &NumArray) -> Mat {
    let w = k.cols();
    (0..x.len())
        .map(|t| {
            (0..x[0].len())
                .map(|ch| {
                    (0..w)
                        .filter(|&j| t + j + 1 >= w)
                        .map(|j| k.data()[ch * w + j] * x[t + j + 1 - w][ch])
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Reference forward for one block with every branch switched on.
fn oracle(z: &Mat, coords: &[(usize, usize)], p: &BlockParams, cfg: &BlockConfig) -> Mat {
    let n = z.len();
    let d = cfg.d_model;
    let (heads, hd) = (cfg.heads, cfg.head_dim);
    let x = rms(z, &p.rms_gain_attn, cfg.rms_eps);

    // grid, pad token in empty and outside cells
    let (h, w) = (coords.iter().map(|c| c.0).max().unwrap() + 1, coords.iter().map(|c| c.1).max().unwrap() + 1);
    let mut grid = vec![vec![p.pad_token.data().to_vec(); w]; h];
    for (i, &(r, c)) in coords.iter().enumerate() {
        grid[r][c] = x[i].clone();
    }
    let ks = cfg.conv_kernel;
    let half = (ks / 2) as isize;
    let z_local: Mat = coords
        .iter()
        .map(|&(r, c)| {
            (0..d)
                .map(|ch| {
                    let mut s = 0.0;
                    for a in 0..ks {
                        for b in 0..ks {
                            let (rr, cc) = (r as isize + a as isize - half, c as isize + b as isize - half);
                            let v = if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                p.pad_token.data()[ch]
                            } else {
                                grid[rr as usize][cc as usize][ch]
                            };
                            s += p.conv2d.data()[ch * ks * ks + a * ks + b] * v;
                        }
                    }
                    s
                })
                .collect()
        })
        .collect();
    let t = p.lambda.data()[0].tanh();
    let hh: Mat = x.iter().zip(&z_local).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + t * v).collect()).collect();

    let q = causal(&mm(&hh, &p.w_q), &p.conv_q);
    let mut k = causal(&mm(&hh, &p.w_k), &p.conv_k);
    for row in k.iter_mut() {
        for seg in row.chunks_mut(hd) {
            let norm = (seg.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            seg.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let v = causal(&mm(&hh, &p.w_v), &p.conv_v);
    let mut alpha = mm(&hh, &p.w_alpha);
    add_bias(&mut alpha, &p.b_alpha);
    let mut beta = mm(&hh, &p.w_beta);
    add_bias(&mut beta, &p.b_beta);

    let mut glob = vec![vec![0.0; heads * hd]; n];
    for head in 0..heads {
        let mut s = vec![vec![0.0; hd]; hd];
        let off = head * hd;
        for tok in 0..n {
            let (a, b) = (sig(alpha[tok][head]), sig(beta[tok][head]));
            let kk = &k[tok][off..off + hd];
            let vv = &v[tok][off..off + hd];
            let old: Vec<f64> = (0..hd).map(|i| a * (0..hd).map(|j| s[i][j] * kk[j]).sum::<f64>()).collect();
            let new: Vec<f64> = (0..hd).map(|i| b * vv[i] + (1.0 - b) * old[i]).collect();
            for i in 0..hd {
                for j in 0..hd {
                    s[i][j] = a * s[i][j] - old[i] * kk[j] + new[i] * kk[j];
                }
            }
            for i in 0..hd {
                glob[tok][off + i] = (0..hd).map(|j| s[i][j] * q[tok][off + j]).sum();
            }
        }
    }

    let mut g = mm(&hh, &p.w_gate);
    add_bias(&mut g, &p.b_gate);
    let mut hl = mm(&z_local, &p.w_local);
    add_bias(&mut hl, &p.b_local);
    let fused: Mat = (0..n)
        .map(|i| (0..heads * hd).map(|j| {
            let gg = sig(g[i][j]);
            gg * glob[i][j] + (1.0 - gg) * hl[i][j]
        }).collect())
        .collect();
    let attn = mm(&fused, &p.w_out);
    let u: Mat = z.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    let y = rms(&u, &p.rms_gain_mlp, cfg.rms_eps);
    let gate = mm(&y, &p.w_mlp_gate);
    let up = mm(&y, &p.w_mlp_up);
    let hmid: Mat = gate
        .iter()
        .zip(&up)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * sig(*x) * y).collect())
        .collect();
    let mlp = mm(&hmid, &p.w_mlp_down);
    u.iter().zip(&mlp).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn cfg() -> BlockConfig {
    BlockConfig { d_model: 8, heads: 2, head_dim: 4, d_ff: 12, chunk_size: 4, ..Default::default() }
}

/// Initialized parameters with every array perturbed, so zero-initialized
/// paths (λ, local projection, gates, pad) take part.
fn jittered(cfg: &BlockConfig, seed: u64) -> BlockParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = BlockParams::init(cfg, &mut rng);
    for (_, a) in p.fields_mut() {
        a.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.4..0.4));
    }
    p
}

fn random_z(n: usize, d: usize, seed: u64) -> NumArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NumArray::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn block_matches_loop_transcription() {
    let cfg = cfg();
    // 2x4 grid with two empty cells, offset from the origin
    let raw = [(3, 5), (3, 6), (4, 5), (3, 8), (4, 7), (4, 8)];
    let coords: Vec<Coord> = raw.iter().map(|&(r, c)| Coord::new(r, c)).collect();
    let shifted: Vec<(usize, usize)> = raw.iter().map(|&(r, c)| (r as usize - 3, c as usize - 5)).collect();
    for seed in 0..4 {
        let p = jittered(&cfg, seed);
        let z = random_z(6, cfg.d_model, 100 + seed);
        let rows: Mat = (0..6).map(|i| z.row(i).to_vec()).collect();
        let want = oracle(&rows, &shifted, &p, &cfg);
        let (got, _) = block_forward(&z, &coords, &p, &cfg, None).unwrap();
        for i in 0..6 {
            for j in 0..cfg.d_model {
                assert!((got.get2(i, j) - want[i][j]).abs() < 1e-10, "seed {seed} ({i},{j})");
            }
        }
    }
}

#[test]
fn zero_second_block_is_transparent() {
    let cfg = cfg();
    let coords: Vec<Coord> = (0..9).map(|i| Coord::new(i / 3, i % 3)).collect();
    let z = random_z(9, cfg.d_model, 7);
    let first = jittered(&cfg, 1);
    let zero = BlockParams::zeros_like(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let (one, _) = block_forward(&z, &coords, &first, &cfg, None).unwrap();
    let (two, traces) = stack_forward(&z, &coords, &[first, zero], &cfg, None).unwrap();
    assert_eq!(one, two);
    assert_eq!(traces.len(), 2);
}

#[test]
fn three_block_stack_is_sequential_composition() {
    let cfg = cfg();
    let coords: Vec<Coord> = (0..10).map(|i| Coord::new(i / 4, i % 4)).collect();
    let z = random_z(10, cfg.d_model, 8);
    let blocks: Vec<BlockParams> = (0..3).map(|s| jittered(&cfg, 20 + s)).collect();
    let (stacked, _) = stack_forward(&z, &coords, &blocks, &cfg, None).unwrap();
    let mut x = z;
    for b in &blocks {
        x = block_forward(&x, &coords, b, &cfg, None).unwrap().0;
    }
    assert_eq!(stacked, x);
}
