//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! `cargo test --release -p neuralfp --test acceptance -- 3 5` runs only the
//! listed criteria.

use std::path::Path;
use std::time::{Duration, Instant};

use neuralfp::augment::{
    apply_ir, mix_background, random_offset_pair, spec_mask_batch, AugmentParams, Augmentor, PoolSplit,
};
use neuralfp::autodiff::{grad_check, ParamStore, Tape, Tensor, LN_EPS};
use neuralfp::contrastive::{batch_loss, SimilarityMatrix};
use neuralfp::encoder::sc_block;
use neuralfp::eval::{evaluate, synthesize_queries, top1_hit_rate, EvalReport, EvalSpec, MatchMode, QueryOutcome};
use neuralfp::index::{inner_product, mips_exhaustive, IvfPqParams, SegmentMeta};
use neuralfp::search::{search_sequence, SearchConfig, Searcher, SegmentIndex};
use neuralfp::synth::CorpusSpec;
use neuralfp::train::{extract_sources, TrainConfig, Trainer};
use neuralfp::{
    AudioClip, Encoder, EncoderConfig, Error, FeatureExtractor, FeatureParams, Fingerprint, FingerprintDb,
    IvfPqIndex, MelSpectrogram,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn unit_rows(n: usize, d: usize, r: &mut ChaCha8Rng) -> Vec<f32> {
    let mut v: Vec<f32> = (0..n * d).map(|_| r.random_range(-1.0f32..1.0)).collect();
    for row in v.chunks_mut(d) {
        let n = inner_product(row, row).sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    v
}

// 1 ------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut note = |name: &str, e: f64| -> Result<(), String> {
        worst = worst.max(e);
        check(e < 1e-4, || format!("{name}: max relative error {e:.2e}"))
    };
    let err = |e: Error| e.to_string();

    for (stride, kh, kw) in [((1, 2), 1, 3), ((2, 1), 3, 1), ((1, 1), 3, 3), ((2, 2), 1, 1)] {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", rand_tensor(&[3, 2, kh, kw], &mut r)).map_err(err)?;
        let b = store.add("b", rand_tensor(&[3], &mut r)).map_err(err)?;
        let x = rand_tensor(&[2, 2, 5, 6], &mut r);
        let rep = grad_check(&mut store, &[x], 1e-5, 1, |t, v| {
            let (wv, bv) = (t.param(w), t.param(b));
            t.conv2d(v[0], wv, Some(bv), stride)
        })
        .map_err(err)?;
        note(&format!("conv2d {kh}x{kw} stride {stride:?}"), rep.max_rel_error)?;
    }
    {
        let mut store = ParamStore::<f64>::new();
        let g = store.add("g", rand_tensor(&[3], &mut r)).map_err(err)?;
        let b = store.add("b", rand_tensor(&[3], &mut r)).map_err(err)?;
        let x = rand_tensor(&[2, 3, 4, 3], &mut r);
        let rep = grad_check(&mut store, &[x], 1e-5, 2, |t, v| {
            let (gv, bv) = (t.param(g), t.param(b));
            t.layer_norm(v[0], gv, bv, LN_EPS)
        })
        .map_err(err)?;
        note("layer_norm", rep.max_rel_error)?;
    }
    {
        // Keep activations away from the ReLU kink.
        let x = Tensor::from_fn(&[3, 7], |i| {
            let m = 0.05 + (i % 5) as f64 * 0.3;
            if i % 2 == 0 { m } else { -m }
        });
        let mut store = ParamStore::<f64>::new();
        let relu = grad_check(&mut store, std::slice::from_ref(&x), 1e-5, 3, |t, v| t.relu(v[0])).map_err(err)?;
        note("relu", relu.max_rel_error)?;
        let elu = grad_check(&mut store, std::slice::from_ref(&x), 1e-5, 4, |t, v| t.elu(v[0])).map_err(err)?;
        note("elu", elu.max_rel_error)?;
        let l2 = grad_check(&mut store, &[x], 1e-5, 5, |t, v| t.l2_normalize(v[0])).map_err(err)?;
        note("l2_normalize", l2.max_rel_error)?;
    }
    {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", rand_tensor(&[4, 3, 2], &mut r)).map_err(err)?;
        let b = store.add("b", rand_tensor(&[4, 3], &mut r)).map_err(err)?;
        let rep = grad_check(&mut store, &[rand_tensor(&[2, 8], &mut r)], 1e-5, 6, |t, v| {
            let (wv, bv) = (t.param(w), t.param(b));
            t.grouped_linear(v[0], wv, Some(bv))
        })
        .map_err(err)?;
        note("grouped_linear", rep.max_rel_error)?;
    }
    {
        let x = rand_tensor(&[2, 6], &mut r);
        let mut store = ParamStore::<f64>::new();
        let rep = grad_check(&mut store, &[x], 1e-5, 7, |t, v| t.reshape(v[0], &[2, 2, 3])).map_err(err)?;
        note("reshape", rep.max_rel_error)?;
    }
    let cfg = EncoderConfig { d: 4, h: 16, u: 3, mel_bins: 8, frames: 8, seed: 3, ..Default::default() };
    {
        let mut enc = Encoder::<f64>::new(cfg.clone()).map_err(err)?;
        let block = enc.blocks()[1].clone();
        let x = rand_tensor(&[2, 4, 4, 4], &mut r);
        let rep = grad_check(enc.params_mut(), &[x], 1e-5, 8, |t, v| sc_block(t, v[0], &block)).map_err(err)?;
        note("sc_block", rep.max_rel_error)?;
    }
    {
        let mut enc = Encoder::<f64>::new(cfg).map_err(err)?;
        let net = enc.clone();
        let x = rand_tensor(&[2, 1, 8, 8], &mut r);
        let rep = grad_check(enc.params_mut(), &[x], 1e-5, 9, |t, v| net.forward(t, v[0])).map_err(err)?;
        note("g o f", rep.max_rel_error)?;
    }
    {
        // NT-Xent gradient against finite differences of the loss itself.
        let z = rand_tensor(&[6, 4], &mut r);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.input_with_grad(z.clone());
        let zn = tape.l2_normalize(x).map_err(err)?;
        let out = neuralfp::contrastive::ntxent(tape.value(zn), 0.05).map_err(err)?;
        let grads = tape.backward(zn, out.grad).map_err(err)?;
        let analytic = grads.wrt(x).unwrap().clone();
        let loss_at = |z: &Tensor<f64>| {
            let mut t = Tape::new(&store);
            let x = t.input(z.clone());
            let zn = t.l2_normalize(x).unwrap();
            neuralfp::contrastive::ntxent(t.value(zn), 0.05).unwrap().loss
        };
        let mut e = 0.0f64;
        for k in 0..z.len() {
            let (mut p, mut m) = (z.clone(), z.clone());
            p.data_mut()[k] += 1e-6;
            m.data_mut()[k] -= 1e-6;
            let num = (loss_at(&p) - loss_at(&m)) / 2e-6;
            e = e.max(neuralfp::autodiff::rel_error(analytic.data()[k], num));
        }
        note("ntxent", e)?;
    }
    let el = t0.elapsed();
    check(el < Duration::from_secs(60), || format!("took {el:?}"))?;
    Ok(format!("max relative error {worst:.2e} over 12 ops, {:.1} s", el.as_secs_f64()))
}

// 2 ------------------------------------------------------------------------

fn normalization() -> Outcome {
    let enc = Encoder::<f32>::new(EncoderConfig { seed: 2, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 1000 {
        let n = 100.min(1000 - done);
        let mels: Vec<MelSpectrogram> = (0..n)
            .map(|i| {
                // Mix of scales, including near-silent and constant inputs.
                let scale = [80.0, 1.0, 1e-3, 0.0][(done + i) % 4];
                let off = r.random_range(-80.0f32..0.0);
                let v = (0..256 * 32).map(|_| off + scale * r.random_range(-1.0f32..1.0)).collect();
                MelSpectrogram::new(v, 256, 32).unwrap()
            })
            .collect();
        for fp in enc.fingerprint_batch(&mels).map_err(|e| e.to_string())? {
            worst = worst.max((f64::from(fp.norm()) - 1.0).abs());
        }
        done += n;
    }
    check(worst <= 1e-5, || format!("max | ||z|| - 1 | = {worst:.2e}"))?;
    Ok(format!("1000 inputs, max | ||z|| - 1 | = {worst:.2e}"))
}

// 3 ------------------------------------------------------------------------

/// Softmax cross-entropy per anchor with target = its partner, averaged.
fn ce_oracle(s: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let target = if i % 2 == 0 { i + 1 } else { i - 1 };
        let logits: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| s[i][k] / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - s[i][target] / tau;
    }
    total / n as f64
}

fn loss_oracle() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = 8;
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            s[i][i] = 1.0;
            for j in 0..i {
                let v = r.random_range(-1.0..1.0);
                s[i][j] = v;
                s[j][i] = v;
            }
        }
        let m = SimilarityMatrix::from_values(n, s.concat()).map_err(|e| e.to_string())?;
        let got = batch_loss(&m, 0.05);
        worst = worst.max((got - ce_oracle(&s, 0.05)).abs());
    }
    check(worst < 1e-10, || format!("oracle mismatch {worst:.2e}"))?;
    let two = SimilarityMatrix::from_values(2, vec![1.0, 0.3, 0.3, 1.0]).map_err(|e| e.to_string())?;
    let l2 = batch_loss(&two, 0.05);
    check(l2 == 0.0, || format!("N=2 loss {l2}"))?;
    let mut uerr = 0.0f64;
    for n in [4usize, 8, 16, 120] {
        let u = SimilarityMatrix::from_values(n, vec![0.5; n * n]).map_err(|e| e.to_string())?;
        let l = batch_loss(&u, 0.05);
        uerr = uerr.max((l - ((n - 1) as f64).ln()).abs());
    }
    check(uerr < 1e-12, || format!("uniform case off by {uerr:.2e}"))?;
    Ok(format!("50 matrices within {worst:.1e}; N=2 gives 0; uniform within {uerr:.1e}"))
}

// 4 ------------------------------------------------------------------------

fn mips_oracle() -> Outcome {
    let (n, d) = (10_000, 32);
    let mut r = rng(4);
    let mut v = unit_rows(n, d, &mut r);
    // Plant exact duplicates so ties must be broken by the lower index.
    for (dst, src) in [(9_000, 10), (5_000, 10), (7_777, 4_321), (100, 9_999)] {
        let row = v[src * d..(src + 1) * d].to_vec();
        v[dst * d..(dst + 1) * d].copy_from_slice(&row);
    }
    let mut queries: Vec<Vec<f32>> = (0..200).map(|_| unit_rows(1, d, &mut r)).collect();
    for i in [10usize, 4_321, 9_999] {
        queries.push(v[i * d..(i + 1) * d].to_vec());
    }
    for (qi, q) in queries.iter().enumerate() {
        let mut best = (f32::NEG_INFINITY, 0usize);
        for i in 0..n {
            let s = inner_product(q, &v[i * d..(i + 1) * d]);
            if s > best.0 {
                best = (s, i);
            }
        }
        let hit = mips_exhaustive(&v, d, q, 1).map_err(|e| e.to_string())?[0];
        check(hit.index == best.1 && hit.score == best.0, || {
            format!("query {qi}: got {} ({}) expected {} ({})", hit.index, hit.score, best.1, best.0)
        })?;
    }
    Ok(format!("{} queries over {n} vectors, exact agreement including ties", queries.len()))
}

// 5 ------------------------------------------------------------------------

fn ivfpq_recall() -> Outcome {
    let t0 = Instant::now();
    let (n, d) = (50_000, 64);
    let mut r = rng(5);
    let v = unit_rows(n, d, &mut r);
    let params = IvfPqParams::default();
    let index = IvfPqIndex::build(&v, d, &params).map_err(|e| e.to_string())?;
    check(index.nlist() == 200 && index.nprobe() == 20 && index.nbits() == 8, || "unexpected defaults".into())?;
    // Queries are noisy copies of stored vectors: the regime fingerprint
    // lookups operate in, with a clear nearest neighbour.
    let nq = 1000;
    let queries: Vec<Vec<f32>> = (0..nq)
        .map(|_| {
            let i = r.random_range(0..n);
            let mut q: Vec<f32> = v[i * d..(i + 1) * d].iter().map(|x| x + r.random_range(-0.08f32..0.08)).collect();
            let norm = inner_product(&q, &q).sqrt();
            q.iter_mut().for_each(|x| *x /= norm);
            q
        })
        .collect();
    let truth: Vec<usize> = queries
        .iter()
        .map(|q| mips_exhaustive(&v, d, q, 1).map(|h| h[0].index))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut agree = 0;
    for (q, &t) in queries.iter().zip(&truth) {
        let out = index.search(q, 1).map_err(|e| e.to_string())?;
        agree += usize::from(out.hits.first().is_some_and(|h| h.index == t));
    }
    let recall = 100.0 * agree as f64 / nq as f64;
    check(recall >= 98.0, || format!("recall@1 {recall:.1}%"))?;
    // Reported only: uniformly random queries have no clear neighbour.
    let mut agree_uniform = 0;
    for _ in 0..nq {
        let q = unit_rows(1, d, &mut r);
        let t = mips_exhaustive(&v, d, &q, 1).map_err(|e| e.to_string())?[0].index;
        let out = index.search(&q, 1).map_err(|e| e.to_string())?;
        agree_uniform += usize::from(out.hits.first().is_some_and(|h| h.index == t));
    }

    let exact_params = IvfPqParams { keep_raw: true, nprobe: 200, ..params };
    let exact = IvfPqIndex::build(&v, d, &exact_params).map_err(|e| e.to_string())?;
    for (qi, q) in queries.iter().take(300).enumerate() {
        let a = exact.search(q, 10).map_err(|e| e.to_string())?.hits;
        let b = mips_exhaustive(&v, d, q, 10).map_err(|e| e.to_string())?;
        check(a == b, || format!("debug mode differs from exhaustive on query {qi}"))?;
    }
    let el = t0.elapsed();
    check(el < Duration::from_secs(300), || format!("took {el:?}"))?;
    Ok(format!(
        "recall@1 {recall:.1}% on {nq} perturbed-copy queries ({:.1}% on uniform queries, not gated); raw-vector full probe exact; {:.0} s",
        100.0 * agree_uniform as f64 / nq as f64,
        el.as_secs_f64()
    ))
}

// 6 ------------------------------------------------------------------------

fn augmentation_contracts() -> Outcome {
    let corpus = CorpusSpec { track_secs: 6.0, noise_clips: 5, noise_secs: 6.0, mic_irs: 3, room_irs: 3, ..Default::default() };
    let tracks = corpus.tracks(PoolSplit::Train);
    let pools = corpus.pools(PoolSplit::Train).map_err(|e| e.to_string())?;
    let mut r = rng(6);
    let mut worst_snr = 0.0f64;
    for i in 0..100 {
        let t = &tracks[i % tracks.len()];
        let start = r.random_range(0..t.len() - 8000);
        let sig = t.slice(start, 8000).map_err(|e| e.to_string())?;
        let noise = &pools.noise()[i % pools.noise().len()];
        let target = r.random_range(0.0..10.0);
        let mixed = mix_background(&sig, noise, target, &mut r).map_err(|e| e.to_string())?;
        // Measure from the output samples.
        let resid: f64 = mixed.clip.samples().iter().zip(sig.samples()).map(|(m, s)| f64::from(m - s).powi(2)).sum();
        let snr = 10.0 * (sig.power() / (resid / sig.len() as f64)).log10();
        worst_snr = worst_snr.max((snr - target).abs());
    }
    check(worst_snr <= 0.1, || format!("SNR off by {worst_snr:.3} dB"))?;

    let extractor = FeatureExtractor::new(FeatureParams::default()).map_err(|e| e.to_string())?;
    let aug = Augmentor::new(AugmentParams::default(), pools.clone(), extractor).map_err(|e| e.to_string())?;
    let max_off = aug.offset_max_samples();
    check(max_off == 1600, || format!("offset bound {max_off} samples"))?;
    let src = extract_sources(&tracks, aug.source_samples(), 4000).map_err(|e| e.to_string())?;
    let mut worst_shift = 0;
    for i in 0..1000 {
        let s = &src[i % src.len()];
        let p = random_offset_pair(s, 8000, max_off, &mut r).map_err(|e| e.to_string())?;
        worst_shift = worst_shift.max(p.org_start.abs_diff(p.rep_start));
        check(p.rep.samples() == &s.samples()[p.rep_start..p.rep_start + 8000], || "replica crop mismatch".into())?;
    }
    check(worst_shift <= 1600, || format!("shift of {worst_shift} samples"))?;

    for len in [1usize, 7, 512, 8000] {
        let mut delta = vec![0.0f32; len];
        delta[0] = 1.0;
        let sig = tracks[0].slice(0, 8000).map_err(|e| e.to_string())?;
        let out = apply_ir(&sig, &delta).map_err(|e| e.to_string())?;
        check(out == sig, || format!("delta IR of length {len} is not an identity"))?;
    }

    for b in 0..20u64 {
        let mut batch: Vec<MelSpectrogram> = (0..8)
            .map(|_| MelSpectrogram::new((0..256 * 32).map(|_| r.random_range(-80.0f32..0.0)).collect(), 256, 32).unwrap())
            .collect();
        let before = batch.clone();
        let fill = batch.iter().map(MelSpectrogram::min).fold(f32::INFINITY, f32::min);
        let mask = spec_mask_batch(&mut batch, &AugmentParams::default(), &mut rng(100 + b)).map_err(|e| e.to_string())?;
        check(mask.regions.len() == 3, || "expected cutout and two stripes".into())?;
        for (s, o) in batch.iter().zip(&before) {
            for f in 0..256 {
                for t in 0..32 {
                    let expect = if mask.contains(f, t) { fill } else { o.get(f, t) };
                    check(s.get(f, t) == expect, || format!("batch {b}: cell ({f},{t}) differs from the shared mask"))?;
                }
            }
        }
    }
    Ok(format!("SNR within {worst_snr:.3} dB; max shift {worst_shift} samples; delta IR exact; shared masks"))
}

// 7 ------------------------------------------------------------------------

/// Tracks whose consecutive segments drift slowly, like real fingerprints.
fn correlated_db(tracks: usize, segs: usize, d: usize, seed: u64) -> FingerprintDb {
    let mut r = rng(seed);
    let mut vectors = Vec::new();
    let mut meta = Vec::new();
    for t in 0..tracks {
        let mut cur: Vec<f32> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for s in 0..segs {
            cur.iter_mut().for_each(|x| *x = 0.8 * *x + 0.6 * r.random_range(-1.0f32..1.0));
            let n = inner_product(&cur, &cur).sqrt();
            vectors.extend(cur.iter().map(|x| x / n));
            meta.push(SegmentMeta { track_id: t as u32, segment: s as u32 });
        }
    }
    let names = (0..tracks).map(|t| format!("track{t}")).collect();
    FingerprintDb::from_parts(d, vectors, meta, names).unwrap()
}

fn sequence_oracle() -> Outcome {
    let d = 64;
    let db = correlated_db(100, 59, d, 7);
    let mut r = rng(7);
    let brute = |qs: &[Vec<f32>]| -> (usize, f32) {
        let l = qs.len();
        let mut best = (usize::MAX, f32::NEG_INFINITY);
        for c in 0..=db.len() - l {
            if !db.same_track_run(c, l) {
                continue;
            }
            let s: f32 = (0..l).map(|i| inner_product(&qs[i], db.vector(c + i))).sum();
            if s > best.1 {
                best = (c, s);
            }
        }
        best
    };
    for qi in 0..100 {
        let l = r.random_range(1..=10);
        let t = r.random_range(0..100u32);
        let start = db.track_start(t).unwrap() + r.random_range(0..=59 - l);
        let qs: Vec<Vec<f32>> = (0..l)
            .map(|i| {
                let mut q: Vec<f32> = db.vector(start + i).iter().map(|x| x + r.random_range(-0.1f32..0.1)).collect();
                let n = inner_product(&q, &q).sqrt();
                q.iter_mut().for_each(|x| *x /= n);
                q
            })
            .collect();
        let refs: Vec<&[f32]> = qs.iter().map(Vec::as_slice).collect();
        let got = search_sequence(&db, SegmentIndex::Exhaustive(&db), &refs, 20).map_err(|e| e.to_string())?;
        let (bc, _) = brute(&qs);
        check(got.db_start_index == bc, || format!("query {qi}: search {} vs brute force {bc}", got.db_start_index))?;

        // The exact subsequence scores L at its own start.
        let exact: Vec<&[f32]> = (0..l).map(|i| db.vector(start + i)).collect();
        let hit = search_sequence(&db, SegmentIndex::Exhaustive(&db), &exact, 20).map_err(|e| e.to_string())?;
        check(hit.db_start_index == start && (hit.score - l as f32).abs() < 1e-4, || {
            format!("exact query {qi}: start {} score {} (want {start}, {l})", hit.db_start_index, hit.score)
        })?;
    }
    Ok(format!("{} segments; 100/100 agree with brute force; exact subsequences score L", db.len()))
}

// 8 ------------------------------------------------------------------------

const E2E_STEPS: usize = 450;
const E2E_LR: f64 = 1e-4;
const E2E_QUERIES: usize = 200;

fn fingerprint_db(enc: &Encoder<f32>, ext: &FeatureExtractor, tracks: &[AudioClip]) -> Result<FingerprintDb, Error> {
    let mut db = FingerprintDb::new(enc.config().d);
    for (i, t) in tracks.iter().enumerate() {
        db.add_track(&format!("test{i:03}"), &enc.fingerprint_batch(&ext.segment_features(t)?)?)?;
    }
    Ok(db)
}

fn run_eval(enc: &Encoder<f32>, ext: &FeatureExtractor, tracks: &[AudioClip], aug: &Augmentor, spec: &EvalSpec) -> Result<EvalReport, Error> {
    let db = fingerprint_db(enc, ext, tracks)?;
    let queries = synthesize_queries(tracks, aug, spec)?;
    let searcher = Searcher { encoder: enc, extractor: ext, db: &db, index: None, config: SearchConfig { exhaustive: true, ..Default::default() } };
    evaluate(&searcher, &db, &queries, spec.near_tolerance, serde_json::to_value(spec)?)
}

fn end_to_end() -> Outcome {
    let err = |e: Error| e.to_string();
    let t0 = Instant::now();
    let corpus = CorpusSpec::default();
    let train_tracks = corpus.tracks(PoolSplit::Train);
    let test_tracks = corpus.tracks(PoolSplit::Test);
    let hours = train_tracks.iter().map(AudioClip::duration_secs).sum::<f64>() / 3600.0;
    let ext = FeatureExtractor::new(FeatureParams::default()).map_err(err)?;
    let train_aug = Augmentor::new(AugmentParams::default(), corpus.pools(PoolSplit::Train).map_err(err)?, ext.clone()).map_err(err)?;
    let test_aug = Augmentor::new(AugmentParams::default(), corpus.pools(PoolSplit::Test).map_err(err)?, ext.clone()).map_err(err)?;
    let sources = extract_sources(&train_tracks, train_aug.source_samples(), 8000).map_err(err)?;

    let cfg = EncoderConfig { d: 64, seed: 8, ..Default::default() };
    let random = Encoder::<f32>::new(cfg.clone()).map_err(err)?;
    let mut enc = random.clone();
    let tc = TrainConfig { batch_size: 120, max_steps: Some(E2E_STEPS), lr_init: Some(E2E_LR), seed: 8, ..Default::default() };
    let t_train = Instant::now();
    let summary = Trainer::new(tc, &train_aug).map_err(err)?.run(&mut enc, &sources).map_err(err)?;
    let train_secs = t_train.elapsed().as_secs_f64();
    eprintln!(
        "  [8] trained {} steps on {:.2} h of audio in {:.0} s, tail loss {:.3}",
        summary.steps,
        hours,
        train_secs,
        summary.tail_loss(20)
    );

    let spec = EvalSpec { queries_per_length: E2E_QUERIES, seed: 8, ..Default::default() };
    let trained = run_eval(&enc, &ext, &test_tracks, &test_aug, &spec).map_err(err)?;
    let baseline = run_eval(&random, &ext, &test_tracks, &test_aug, &spec).map_err(err)?;
    eprint!("{}", trained.to_text().lines().take(5).map(|l| format!("  [8] trained   {l}\n")).collect::<String>());
    eprint!("{}", baseline.to_text().lines().take(5).map(|l| format!("  [8] random    {l}\n")).collect::<String>());

    let at3 = trained.row(3.0).map(|r| r.exact).unwrap_or(0.0);
    let base3 = baseline.row(3.0).map(|r| r.exact).unwrap_or(0.0);
    let mut failures = Vec::new();
    if hours < 1.9 {
        failures.push(format!("only {hours:.2} h of training audio"));
    }
    if train_secs > 7200.0 {
        failures.push(format!("training took {train_secs:.0} s"));
    }
    if at3 < 60.0 {
        failures.push(format!("3 s exact {at3:.1}% < 60%"));
    }
    if at3 - base3 < 40.0 {
        failures.push(format!("margin over random init {:.1} pp < 40 pp", at3 - base3));
    }
    for w in trained.rows.windows(2) {
        if w[1].exact + 1.0 < w[0].exact {
            failures.push(format!("hit rate drops from {:.1}% at {} s to {:.1}% at {} s", w[0].exact, w[0].length_secs, w[1].exact, w[1].length_secs));
        }
    }
    let summary = format!("3 s exact {at3:.1}% vs random init {base3:.1}%; {:.0} s total", t0.elapsed().as_secs_f64());
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

// 9 ------------------------------------------------------------------------

fn metric_arithmetic() -> Outcome {
    let r = top1_hit_rate(&[(Some(1), 1), (Some(2), 2), (Some(3), 3), (Some(0), 4)], MatchMode::Exact);
    check(r == 75.0, || format!("3/4 gave {r}"))?;
    let off: Vec<_> = (0..50).map(|i| (Some(i + 1), i)).collect();
    let (e, n) = (top1_hit_rate(&off, MatchMode::Exact), top1_hit_rate(&off, MatchMode::Near(1)));
    check(e == 0.0 && n == 100.0, || format!("off-by-one gave exact {e}, near {n}"))?;
    let mut rr = rng(9);
    let outcomes: Vec<QueryOutcome> = (0..600)
        .map(|i| {
            let truth = rr.random_range(0..500usize);
            let pred = match i % 4 {
                0 => None,
                1 => Some(truth),
                2 => Some(truth + 1),
                _ => Some(rr.random_range(0..500)),
            };
            QueryOutcome {
                query_id: format!("q{i}"),
                length_secs: [1.0, 2.0, 3.0, 5.0, 6.0, 10.0][i % 6],
                truth_index: truth,
                truth_track: (truth / 50) as u32,
                predicted_index: pred,
                predicted_track: pred.map(|p| (p / 50) as u32),
                score: None,
            }
        })
        .collect();
    let report = EvalReport::from_outcomes(serde_json::json!({}), outcomes, 1);
    for row in &report.rows {
        check(row.near >= row.exact, || format!("near < exact at {} s", row.length_secs))?;
    }
    Ok("3/4 -> 75.0; off-by-one -> exact 0 / near 100; near >= exact in every cell".into())
}

// 10 -----------------------------------------------------------------------

/// Every prefix must fail to load with a typed format or truncation error.
fn truncations_rejected(name: &str, bytes: &[u8], load: impl Fn(&[u8]) -> Result<(), Error>) -> Result<(), String> {
    let step = (bytes.len() / 400).max(1);
    let mut cut = 0;
    while cut < bytes.len() {
        match load(&bytes[..cut]) {
            Err(Error::Truncated { .. } | Error::Format { .. }) => {}
            Err(e) => return Err(format!("{name}: prefix of {cut} bytes gave untyped error {e}")),
            Ok(()) => return Err(format!("{name}: prefix of {cut} bytes loaded")),
        }
        cut += if cut < 256 { 1 } else { step };
    }
    let mut bad = bytes.to_vec();
    bad[0] ^= 0xff;
    check(matches!(load(&bad), Err(Error::Format { .. })), || format!("{name}: bad magic not rejected"))
}

fn persistence() -> Outcome {
    let err = |e: Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(10);
    let d = 32;

    let mut db = FingerprintDb::new(d);
    for t in 0..12 {
        let n = r.random_range(1..40);
        let fps: Vec<Fingerprint> = (0..n).map(|_| Fingerprint::from_unit(unit_rows(1, d, &mut r))).collect();
        db.add_track(&format!("track {t} ü"), &fps).map_err(err)?;
    }
    let db_path = dir.path().join("x.fpdb");
    db.save(&db_path).map_err(err)?;
    let back = FingerprintDb::load(&db_path).map_err(err)?;
    check(back == db, || "db round trip differs".into())?;
    let sidecar = std::fs::read_to_string(neuralfp::index::sidecar_path(&db_path)).map_err(|e| e.to_string())?;
    truncations_rejected("db", &db.to_bytes(), |b| FingerprintDb::from_bytes(b, &sidecar, Path::new("x")).map(|_| ()))?;

    for params in [
        IvfPqParams { nlist: 8, nprobe: 3, ..Default::default() },
        IvfPqParams { nlist: 8, nprobe: 3, residual: true, keep_raw: true, ..Default::default() },
    ] {
        let index = IvfPqIndex::build(db.vectors(), d, &params).map_err(err)?;
        let p = dir.path().join("x.ivf");
        index.save(&p).map_err(err)?;
        let back = IvfPqIndex::load(&p).map_err(err)?;
        check(back.to_bytes() == index.to_bytes(), || "index bytes differ after round trip".into())?;
        for qi in 0..20 {
            let q = db.vector(qi * 7 % db.len());
            check(back.search(q, 5).map_err(err)? == index.search(q, 5).map_err(err)?, || "index search differs".into())?;
        }
        truncations_rejected("index", &index.to_bytes(), |b| IvfPqIndex::from_bytes(b, Path::new("x")).map(|_| ()))?;
    }

    let enc = Encoder::<f32>::new(EncoderConfig { d: 8, h: 32, u: 4, seed: 10, ..Default::default() }).map_err(err)?;
    let ck = dir.path().join("m.ckpt");
    enc.save(&ck).map_err(err)?;
    let back = Encoder::<f32>::load(&ck).map_err(err)?;
    check(back.config() == enc.config(), || "checkpoint config differs".into())?;
    for ((_, a), (_, b)) in back.params().iter().zip(enc.params().iter()) {
        check(a.name == b.name && a.value == b.value, || format!("parameter {} differs", a.name))?;
    }
    let bytes = std::fs::read(&ck).map_err(|e| e.to_string())?;
    let cut_path = dir.path().join("cut.ckpt");
    truncations_rejected("checkpoint", &bytes, |b| {
        std::fs::write(&cut_path, b).map_err(Error::Io)?;
        Encoder::<f32>::load(&cut_path).map(|_| ())
    })?;
    Ok("db, index and checkpoint round trips lossless; every truncation and bad magic rejected with a typed error".into())
}

// --------------------------------------------------------------------------

fn main() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
    let criteria: [Criterion; 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("fingerprint normalization", normalization),
        ("contrastive loss oracle", loss_oracle),
        ("exhaustive MIPS oracle", mips_oracle),
        ("IVF-PQ recall", ivfpq_recall),
        ("augmentation contracts", augmentation_contracts),
        ("sequence search oracle", sequence_oracle),
        ("end-to-end toy training", end_to_end),
        ("metric arithmetic", metric_arithmetic),
        ("persistence", persistence),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {id:>2} PASS  {name}: {msg} [{secs:.1} s]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {msg} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
