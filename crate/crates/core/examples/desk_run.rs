//! Trains on the standard synthetic fog fixture and prints validation metrics.
//!
//! `cargo run --release -p mediasplat --example desk_run -- [steps] [flags]`
//! where flags are any of `no-tri no-epi no-res no-alpha` or `key=value`
//! config overrides.

use std::time::Instant;

use mediasplat::hydrosim::{make_fixture, FixtureSpec};
use mediasplat::medium::MediumMap;
use mediasplat::render::{render, AlphaMode};
use mediasplat::train::{train, Dataset, TrainConfig};

fn main() -> mediasplat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let has = |f: &str| args.iter().any(|a| a == f);
    let fix = make_fixture(&FixtureSpec::default())?;
    let data = Dataset::from_fixture(&fix, 0.05, 0);
    let base = TrainConfig {
        total_steps: steps,
        tri_enabled: !has("no-tri"),
        epi_enabled: !has("no-epi"),
        res_enabled: !has("no-res"),
        alpha_adjust_enabled: !has("no-alpha"),
        ..Default::default()
    };
    // Remaining `key=value` arguments override config fields.
    let mut table: toml::Table = toml::from_str(&base.to_toml()).expect("config round trip");
    for a in args.iter().skip(2).filter(|a| a.contains('=')) {
        let (k, v) = a.split_once('=').expect("contains =");
        table.insert(k.to_string(), toml::from_str::<toml::Table>(&format!("v = {v}")).expect("value")["v"].clone());
    }
    let cfg = TrainConfig::from_toml(&toml::to_string(&table).expect("table"))?;
    let t0 = Instant::now();
    let out = train(&cfg, &data, None)?;
    let first = &out.log[0].loss.terms;
    let last = &out.log.last().expect("steps").loss.terms;
    println!("time {:.1}s gaussians {}", t0.elapsed().as_secs_f64(), out.model.cloud.len());
    println!("photo first {:.5} last {:.5}", first.photo, last.photo);
    for r in out.log.iter().step_by((steps / 10).max(1)) {
        println!(
            "  step {:5} div {} photo {:.5} tri {:.4} epi {:.4} res {:.4} n {}",
            r.step, r.divisor, r.loss.terms.photo, r.loss.terms.tri, r.loss.terms.epi, r.loss.terms.res, r.gaussians
        );
    }
    let v = &out.validation;
    println!(
        "novel {:.2} dB  restored {:.2} dB  degraded {:.2} dB  depth_mae {:.4}",
        v.novel_view.as_ref().map_or(f64::NAN, |r| r.mean_psnr),
        v.restoration.as_ref().map_or(f64::NAN, |r| r.mean_psnr),
        v.degraded_baseline.as_ref().map_or(f64::NAN, |r| r.mean_psnr),
        v.depth_mae.unwrap_or(f64::NAN)
    );
    for (k, tv) in data.test.iter().enumerate() {
        let map = MediumMap::from_field(&out.model.field, &tv.camera)?;
        let b = render(&out.model.cloud, &tv.camera, Some(&map), AlphaMode::Raw)?;
        let gt = &data.test_depth[k];
        let n = gt.data().len() as f64;
        let (mut bias, mut mae, mut wsum, mut low) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..gt.data().len() {
            let d = b.depth.data()[i] - gt.data()[i];
            bias += d;
            mae += d.abs();
            wsum += b.alpha.data()[i];
            low += (b.alpha.data()[i] < 0.5) as u8 as f64;
        }
        println!(
            "  view {k}: mae {:.3} bias {:+.3} mean W {:.3} low-W frac {:.3} gt mean {:.3}",
            mae / n,
            bias / n,
            wsum / n,
            low / n,
            gt.mean()
        );
    }
    let s = map_summary(&out.model.field, &data.test[0].camera)?;
    println!("medium at center: {s}");
    Ok(())
}

fn map_summary(field: &mediasplat::medium::MediumField, cam: &mediasplat::projective::CameraView) -> mediasplat::Result<String> {
    let m = MediumMap::from_field(field, cam)?;
    let s = m.at(cam.width / 2, cam.height / 2);
    Ok(format!("{s:?}"))
}
