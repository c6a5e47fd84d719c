//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use latentcloud::annotation::{select_in_sphere, LabelStore, SphereAnnotation};
use latentcloud::cli;
use latentcloud::dataset::{self, DatasetError};
use latentcloud::exec::Exec;
use latentcloud::model::{self, LossWeights, ModelParameters, Part, Vec3};
use latentcloud::model_file::ModelFile;
use latentcloud::numerics::{Matrix, ParameterSet};
use latentcloud::session::{Session, SessionConfig};
use latentcloud::trainer;
use latentcloud::wire::{ClientMessage, ServerMessage, SnapshotMessage, SnapshotReason};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{blob_spheres, WsClient};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let ds = dataset::synth_blobs(3, 4, 16, 0.05, 21).map_err(|e| e.to_string())?;
    let arch = model::Architecture {
        input_dim: 16,
        encoder_hidden: 32,
        decoder_hidden: 32,
        classes: 3,
    };
    let params = ModelParameters::init(arch, 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = ds.images().clone();
    let labels: Vec<Option<usize>> = ds
        .eval_labels()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, &c)| (i % 2 == 0).then_some(c))
        .collect();
    let noise = Matrix::from_vec(
        x.rows(),
        3,
        (0..x.rows() * 3).map(|_| rng.sample(StandardNormal)).collect(),
    );
    let w = LossWeights::default();
    let (_, grads) =
        model::loss_and_gradients(Exec::Sequential, &x, &labels, &params, &noise, w).map_err(|e| e.to_string())?;

    // 20 coordinates: 7 encoder, 7 decoder, 6 classifier, uniformly within each part.
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut offsets = vec![0];
    for s in &sizes {
        offsets.push(offsets.last().unwrap() + s);
    }
    let coords_in = |part: Part| -> Vec<usize> {
        (0..sizes.len())
            .filter(|&t| ModelParameters::part_of_tensor(t) == part)
            .flat_map(|t| offsets[t]..offsets[t + 1])
            .collect()
    };
    let mut picks = Vec::new();
    for (part, n) in [(Part::Encoder, 7), (Part::Decoder, 7), (Part::Classifier, 6)] {
        let pool = coords_in(part);
        for _ in 0..n {
            picks.push(pool[rng.random_range(0..pool.len())]);
        }
    }
    let flat = params.to_flat();
    let g = grads.0.to_flat();
    let h = 1e-4;
    let loss_at = |v: &[f64]| {
        let p = ModelParameters::from_flat(arch, v).unwrap();
        model::total_loss(&x, &labels, &p, &noise, w).unwrap().total
    };
    let mut worst: f64 = 0.0;
    for &i in &picks {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
        ensure(
            rel <= 1e-4,
            format!("coordinate {i}: analytic {} vs numeric {fd} (rel {rel:e})", g[i]),
        )?;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(10), format!("took {took:?}"))?;
    Ok(format!("20 coordinates, worst relative error {worst:.2e}, {took:.2?}"))
}

fn closed_form_losses() -> Check {
    let kl0 = model::loss_kl([0.0; 3], [0.0; 3]);
    ensure(kl0 == 0.0, format!("kl(0,0) = {kl0}"))?;
    let kl1 = model::loss_kl([1.0, 0.0, 0.0], [0.0; 3]);
    ensure((kl1 - 0.5).abs() <= 1e-12, format!("kl((1,0,0),0) = {kl1}"))?;
    let ce = model::loss_classification(&[0.0; 10], 3).map_err(|e| e.to_string())?;
    ensure(
        (ce - 10f64.ln()).abs() <= 1e-12,
        format!("uniform cross-entropy = {ce}"),
    )?;
    let rec = model::loss_reconstruction(&[0.5; 4], &[0.5; 4]).map_err(|e| e.to_string())?;
    ensure(
        (rec - 4.0 * 2f64.ln()).abs() <= 1e-12,
        format!("reconstruction = {rec}"),
    )?;
    Ok(format!("kl {kl0}, {kl1}; ce {ce:.15}; rec {rec:.15}"))
}

/// The last snapshot taken at `iteration`.
fn last_at(snaps: &[SnapshotMessage], iteration: u64) -> Option<&SnapshotMessage> {
    snaps.iter().rev().find(|s| s.iteration == iteration)
}

struct BlobReplay {
    csv: String,
    snapshots: Vec<SnapshotMessage>,
    tuned: ModelFile,
    truth: Vec<usize>,
    took: Duration,
}

const BLOBS: &str = "3,50,16,0.05";

fn run_blob_replay(dir: &Path) -> Result<BlobReplay, String> {
    let start = Instant::now();
    let model = dir.join("blobs.model");
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let code = cli::run([
        "latentcloud",
        "pretrain",
        "--synthetic",
        BLOBS,
        "--seed",
        "7",
        "--epochs",
        "50",
        "--lr",
        "0.02",
        "--beta",
        "4",
        "--lambda",
        "2",
        "--out",
        &s(&model),
    ]);
    ensure(code == 0, "pretrain failed")?;

    let file = ModelFile::load(&model).map_err(|e| e.to_string())?;
    let ds = dataset::synth_blobs(3, 50, 16, 0.05, 7).map_err(|e| e.to_string())?;
    let positions = trainer::embed_all(&file.params, &ds).map_err(|e| e.to_string())?;
    let truth = ds.eval_labels().unwrap().to_vec();
    let script = dir.join("blobs.jsonl");
    let mut lines = String::new();
    for sphere in blob_spheres(&positions, &truth, 3, 0.3) {
        lines.push_str(&sphere.to_json_line(0));
    }
    lines.push_str("{\"after_snapshot\":0,\"type\":\"start_update\",\"steps\":50}\n");
    fs::write(&script, lines).map_err(|e| e.to_string())?;

    let (csv, snaps, tuned) = (dir.join("m.csv"), dir.join("snaps.jsonl"), dir.join("tuned.model"));
    let code = cli::run([
        "latentcloud",
        "replay",
        "--model",
        &s(&model),
        "--synthetic",
        BLOBS,
        "--script",
        &s(&script),
        "--lr",
        "0.04",
        "--out",
        &s(&csv),
        "--snapshots-out",
        &s(&snaps),
        "--model-out",
        &s(&tuned),
    ]);
    ensure(code == 0, "replay failed")?;
    let snapshots = fs::read_to_string(&snaps)
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| match ServerMessage::from_json(l) {
            Ok(ServerMessage::Snapshot(s)) => Ok(s),
            other => Err(format!("not a snapshot: {other:?}")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BlobReplay {
        csv: fs::read_to_string(&csv).map_err(|e| e.to_string())?,
        snapshots,
        tuned: ModelFile::load(&tuned).map_err(|e| e.to_string())?,
        truth,
        took: start.elapsed(),
    })
}

fn parse_silhouettes(csv: &str) -> Vec<(u64, Option<f64>)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[5].parse().ok())
        })
        .collect()
}

fn clustering_improvement(r: &BlobReplay) -> Check {
    let rows = parse_silhouettes(&r.csv);
    let initial = rows
        .iter()
        .rev()
        .find(|(it, _)| *it == 0)
        .and_then(|(_, s)| *s)
        .ok_or("no silhouette at iteration 0")?;
    let (last_it, final_s) = *rows.last().unwrap();
    let final_s = final_s.ok_or("no final silhouette")?;
    ensure(last_it == 50, format!("last row at iteration {last_it}"))?;
    let held = dataset::synth_blobs(3, 50, 16, 0.05, 1007).map_err(|e| e.to_string())?;
    let acc = trainer::classifier_accuracy(&r.tuned.params, &held)
        .map_err(|e| e.to_string())?
        .unwrap();
    ensure(final_s > initial, format!("silhouette {initial:.5} -> {final_s:.5}"))?;
    ensure(acc >= 0.9, format!("held-out accuracy {acc:.3}"))?;
    ensure(r.took < Duration::from_secs(60), format!("took {:?}", r.took))?;
    Ok(format!(
        "silhouette {initial:.4} -> {final_s:.4}, held-out accuracy {:.1}%, {:.2?}",
        acc * 100.0,
        r.took
    ))
}

fn co_distance(s: &SnapshotMessage, truth: &[usize], classes: usize) -> f64 {
    let p = s.positions3();
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..classes {
        let labeled: Vec<Vec3> = (0..p.len())
            .filter(|&i| s.label_state[i] == Some(c))
            .map(|i| p[i])
            .collect();
        if labeled.is_empty() {
            continue;
        }
        let mut cen = [0.0; 3];
        for q in &labeled {
            for k in 0..3 {
                cen[k] += q[k] / labeled.len() as f64;
            }
        }
        for i in 0..p.len() {
            if truth[i] == c && s.label_state[i].is_none() {
                total += (0..3).map(|k| (p[i][k] - cen[k]).powi(2)).sum::<f64>().sqrt();
                count += 1;
            }
        }
    }
    total / count as f64
}

fn unlabeled_co_movement(r: &BlobReplay) -> Check {
    let before = last_at(&r.snapshots, 0).ok_or("no iteration-0 snapshot")?;
    let after = last_at(&r.snapshots, 50).ok_or("no iteration-50 snapshot")?;
    ensure(
        before.label_state == after.label_state,
        "labels changed during the update",
    )?;
    let unlabeled = before.label_state.iter().filter(|l| l.is_none()).count();
    ensure(unlabeled > 0, "every sample is labelled")?;
    let (d0, d1) = (co_distance(before, &r.truth, 3), co_distance(after, &r.truth, 3));
    ensure(d1 < d0, format!("mean distance {d0:.5} -> {d1:.5}"))?;
    Ok(format!(
        "{unlabeled} unlabelled, mean distance to labelled centroid {d0:.5} -> {d1:.5}"
    ))
}

fn sphere_membership() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut total = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..200);
        let scale: f64 = rng.random_range(0.1..10.0);
        let positions: Vec<Vec3> = (0..n)
            .map(|_| [0; 3].map(|_| rng.random_range(-scale..scale)))
            .collect();
        let sphere = SphereAnnotation {
            center: [0; 3].map(|_| rng.random_range(-scale..scale)),
            radius: rng.random_range(1e-3..scale * 1.5),
            label: 0,
            sequence: 1,
        };
        let brute: Vec<usize> = (0..n)
            .filter(|&i| {
                let d2: f64 = (0..3).map(|k| (positions[i][k] - sphere.center[k]).powi(2)).sum();
                d2.sqrt() <= sphere.radius
            })
            .collect();
        let got = select_in_sphere(&positions, &sphere);
        ensure(got == brute, format!("mismatch on instance with {n} points"))?;
        total += got.len();
    }
    Ok(format!("1000 instances equal, {total} selections"))
}

fn determinism(dir: &Path) -> Check {
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let script = dir.join("det.jsonl");
    fs::write(
        &script,
        "{\"after_snapshot\":0,\"type\":\"annotate\",\"center\":[0,0,0],\"radius\":0.5,\"label\":0}\n\
         {\"after_snapshot\":0,\"type\":\"start_update\",\"steps\":10}\n\
         {\"after_snapshot\":4,\"type\":\"annotate\",\"center\":[0.2,0,0],\"radius\":0.5,\"label\":1}\n\
         {\"after_snapshot\":10,\"type\":\"start_update\",\"steps\":5}\n",
    )
    .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("det{run}.csv"));
        let code = cli::run([
            "latentcloud",
            "replay",
            "--synthetic",
            "3,20,16,0.1",
            "--seed",
            "3",
            "--epochs",
            "5",
            "--lr",
            "0.02",
            "--hidden",
            "32",
            "--script",
            &s(&script),
            "--out",
            &s(&out),
        ]);
        ensure(code == 0, "replay failed")?;
        outputs.push(fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], "metrics CSV differs between runs")?;
    let rows = outputs[0].iter().filter(|&&b| b == b'\n').count() - 1;

    // A live session with annotations racing an update, then its log replayed.
    let ds = dataset::synth_blobs(3, 20, 16, 0.1, 3).map_err(|e| e.to_string())?;
    let config = SessionConfig {
        train: trainer::TrainConfig {
            learning_rate: 0.02,
            encoder_hidden: 32,
            decoder_hidden: 32,
            seed: 3,
            ..Default::default()
        },
        auto_update: false,
    };
    let params = config.train.init_params(&ds).map_err(|e| e.to_string())?;
    let (mut live, _) = Session::open(ds.clone(), params.clone(), config.clone()).map_err(|e| e.to_string())?;
    let at = |s: &Session, i: usize| s.positions()[i];
    let c0 = at(&live, 0);
    live.handle(ClientMessage::Annotate {
        center: c0,
        radius: 0.01,
        label: 0,
    });
    live.handle(ClientMessage::StartUpdate { steps: Some(12) });
    for k in 0..12 {
        live.step();
        if k == 3 || k == 7 {
            let c = at(&live, 30 + k);
            live.handle(ClientMessage::Annotate {
                center: c,
                radius: 0.01,
                label: (k % 3),
            });
        }
    }
    let c = at(&live, 50);
    live.handle(ClientMessage::Annotate {
        center: c,
        radius: 0.01,
        label: 2,
    });
    let log = dir.join("log.jsonl");
    fs::write(&log, cli::script_bytes(live.log())).map_err(|e| e.to_string())?;
    let model = dir.join("det.model");
    ModelFile {
        params,
        config: config.train.clone(),
    }
    .save(&model)
    .map_err(|e| e.to_string())?;
    let labels_out = dir.join("labels.json");
    let code = cli::run([
        "latentcloud",
        "replay",
        "--model",
        &s(&model),
        "--synthetic",
        "3,20,16,0.1",
        "--script",
        &s(&log),
        "--labels-out",
        &s(&labels_out),
    ]);
    ensure(code == 0, "log replay failed")?;
    let replayed: LabelStore =
        serde_json::from_slice(&fs::read(&labels_out).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(&replayed == live.labels(), "replayed label store differs")?;
    let labeled = replayed.labeled_count();
    ensure(
        labeled > 0 && labeled < ds.len(),
        format!("{labeled} of {} labelled", ds.len()),
    )?;
    Ok(format!(
        "{rows} CSV rows byte-identical; label store of {} labelled samples reproduced",
        replayed.labeled_count()
    ))
}

fn idx_bit_exactness() -> Check {
    let mut images = Vec::new();
    for v in [0x0803u32, 1, 2, 2] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&[0, 255, 128, 64]);
    let parsed = dataset::parse_idx_images(&images).map_err(|e| e.to_string())?;
    let ds = dataset::dataset_from_idx(&images, None).map_err(|e| e.to_string())?;
    let expect = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
    ensure(ds.sample(0) == expect, format!("pixels {:?}", ds.sample(0)))?;
    ensure((parsed.rows, parsed.cols, parsed.count) == (2, 2, 1), "header fields")?;

    let mut wrong = images.clone();
    wrong[3] = 0x01;
    ensure(
        matches!(dataset::parse_idx_images(&wrong), Err(DatasetError::BadMagic { .. })),
        "wrong magic not rejected as BadMagic",
    )?;
    ensure(
        matches!(
            dataset::parse_idx_images(&images[..images.len() - 1]),
            Err(DatasetError::Length { .. })
        ),
        "truncated file not rejected as Length",
    )?;
    let mut labels = Vec::new();
    labels.extend_from_slice(&0x0801u32.to_be_bytes());
    labels.extend_from_slice(&1u32.to_be_bytes());
    labels.push(7);
    ensure(
        dataset::parse_idx_labels(&labels).map_err(|e| e.to_string())? == vec![7],
        "label fixture",
    )?;
    let mut bad_labels = labels.clone();
    bad_labels[2] = 0x09;
    ensure(
        matches!(
            dataset::parse_idx_labels(&bad_labels),
            Err(DatasetError::BadMagic { .. })
        ),
        "wrong label magic",
    )?;
    ensure(
        matches!(
            dataset::parse_idx_labels(&labels[..8]),
            Err(DatasetError::Length { .. })
        ),
        "truncated labels",
    )?;
    Ok("pixels [0, 1, 128/255, 64/255] exact; BadMagic and Length raised".into())
}

fn protocol_conformance() -> Check {
    let server = common::spawn_server(dataset::synth_blobs(3, 40, 16, 0.05, 5).unwrap(), 64)?;
    let mut client = WsClient::connect(server.addr)?;
    let hello = client.recv()?;
    ensure(
        matches!(hello, ServerMessage::Hello { n: 120, d: 16, .. }),
        format!("first message {hello:?}"),
    )?;
    let initial = client.recv_snapshot()?;
    ensure(
        initial.reason == SnapshotReason::Initial,
        "second message is not the initial snapshot",
    )?;

    let p0 = initial.positions3()[0];
    client.send(&ClientMessage::Annotate {
        center: p0,
        radius: 0.05,
        label: 1,
    })?;
    client.send(&ClientMessage::StartUpdate { steps: Some(50) })?;

    // Pause at step 10 so the second annotation is guaranteed to arrive mid-update.
    let mut echoes = 0;
    let mut steps: Vec<SnapshotMessage> = Vec::new();
    let mut acks = Vec::new();
    let mut paused_sent = false;
    loop {
        match client.recv()? {
            ServerMessage::Snapshot(s) => match s.reason {
                SnapshotReason::Echo => echoes += 1,
                SnapshotReason::Step | SnapshotReason::Final => {
                    let done = s.reason == SnapshotReason::Final;
                    if s.iteration == 10 && !paused_sent {
                        client.send(&ClientMessage::Pause)?;
                        paused_sent = true;
                    }
                    steps.push(s);
                    if done {
                        break;
                    }
                }
                r => return Err(format!("unexpected snapshot {r:?}")),
            },
            ServerMessage::State {
                paused: true, state, ..
            } => {
                ensure(
                    state == latentcloud::wire::SessionState::Updating,
                    "paused outside an update",
                )?;
                client.send(&ClientMessage::Annotate {
                    center: [0.0; 3],
                    radius: 1e6,
                    label: 2,
                })?;
                client.send(&ClientMessage::Resume)?;
            }
            ServerMessage::Annotated {
                sequence, iteration, ..
            } => acks.push((sequence, iteration)),
            ServerMessage::Error { code, text } => return Err(format!("error {code:?}: {text}")),
            _ => {}
        }
    }
    let iters: Vec<u64> = steps.iter().map(|s| s.iteration).collect();
    ensure(echoes == 1, format!("{echoes} echo snapshots"))?;
    ensure(iters == (1..=50).collect::<Vec<_>>(), format!("iterations {iters:?}"))?;
    ensure(acks.len() == 2, format!("acks {acks:?}"))?;
    let (_, boundary) = acks[1];
    ensure(
        (10..50).contains(&boundary),
        format!("second annotation applied after iteration {boundary}"),
    )?;
    let first_with = steps
        .iter()
        .position(|s| s.label_state.iter().all(|l| *l == Some(2)))
        .ok_or("queued annotation never applied")?;
    ensure(
        steps[first_with].iteration == boundary + 1 && steps[first_with].labels_changed,
        format!(
            "applied after iteration {boundary}, first visible at {}",
            steps[first_with].iteration
        ),
    )?;
    ensure(
        steps[first_with..]
            .iter()
            .all(|s| s.label_state.iter().all(|l| *l == Some(2))),
        "queued annotation lost",
    )?;
    let last = server.stop(&mut client)?;
    ensure(last.reason == SnapshotReason::Shutdown, "no final snapshot on shutdown")?;
    Ok(format!(
        "hello, 1 echo, snapshots 1..=50 consecutive; queued annotation applied at boundary {boundary}"
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let blob = run_blob_replay(dir.path());
    let results: Vec<(&str, Check)> = vec![
        ("gradient correctness", gradient_correctness()),
        ("closed-form loss oracles", closed_form_losses()),
        (
            "clustering improvement",
            blob.as_ref().map_err(Clone::clone).and_then(clustering_improvement),
        ),
        (
            "unlabelled co-movement",
            blob.as_ref().map_err(Clone::clone).and_then(unlabeled_co_movement),
        ),
        ("sphere membership oracle", sphere_membership()),
        ("determinism", determinism(dir.path())),
        ("IDX bit-exactness", idx_bit_exactness()),
        ("protocol conformance", protocol_conformance()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
