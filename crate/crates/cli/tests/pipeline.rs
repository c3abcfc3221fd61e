mod common;

use std::fs;

use common::small_config;
use panogen_cli::dataset::{read_range, Manifest};
use panogen_cli::eval::{evaluate, EvalSet};
use panogen_cli::gen_data::weather_of;
use panogen_cli::train::{latest_checkpoint, parse_log, LOG_FILE};
use panogen_cli::{eval_cmd, gen_data, sample_cmd, train, ConditionSource};
use panogen_core::io::{format_calib, write_kitti_bin};
use panogen_core::metrics::{MetricReport, Region};
use panogen_core::synthworld::Weather;

#[test]
fn zero_samples_give_a_valid_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    let m = gen_data(&small_config(0, 1), &out).unwrap();
    assert!(m.samples.is_empty());
    let back = Manifest::read(&out).unwrap();
    back.verify(&out).unwrap();
    assert_eq!(back.dataset_hash(), m.dataset_hash());
}

#[test]
fn rerun_reproduces_every_file_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(3, 1);
    let a = gen_data(&c, &tmp.path().join("a")).unwrap();
    let b = gen_data(&c, &tmp.path().join("b")).unwrap();
    assert_eq!(a.files, b.files);
    assert_eq!(a.dataset_hash(), b.dataset_hash());
    let mut other = c.clone();
    other.data.seed = 100;
    let d = gen_data(&other, &tmp.path().join("d")).unwrap();
    assert_ne!(d.dataset_hash(), a.dataset_hash());
}

#[test]
fn refuses_to_overwrite_a_populated_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    gen_data(&small_config(1, 1), &out).unwrap();
    assert!(gen_data(&small_config(1, 1), &out).is_err());
}

#[test]
fn weather_tags_follow_the_mix() {
    let mut c = small_config(1000, 1);
    c.data.weather.clean = 0.5;
    c.data.weather.fog = 0.25;
    c.data.weather.snow = 0.25;
    let n = c.data.samples;
    let mut counts = [0usize; 4];
    for i in 0..n {
        counts[Weather::ALL.iter().position(|&w| w == weather_of(&c, i)).unwrap()] += 1;
    }
    assert_eq!(counts[1], 0, "night has zero weight");
    for (k, p) in [(0, 0.5), (2, 0.25), (3, 0.25)] {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[k] as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
    }
    // the manifest records exactly those draws
    let tmp = tempfile::tempdir().unwrap();
    c.data.samples = 12;
    let m = gen_data(&c, &tmp.path().join("d")).unwrap();
    for (i, s) in m.samples.iter().enumerate() {
        assert_eq!(s.weather, weather_of(&c, i).as_str());
    }
}

#[test]
fn missing_dataset_error_says_what_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    let err = train(&small_config(1, 1), &tmp.path().join("nowhere"), &tmp.path().join("run"), None).unwrap_err();
    assert!(format!("{err:#}").contains("gen-data"), "{err:#}");
}

#[test]
fn train_sample_eval_round() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(3, 20);
    let data = tmp.path().join("data");
    gen_data(&c, &data).unwrap();
    let run = tmp.path().join("run");
    let outcome = train(&c, &data, &run, None).unwrap();

    // one log line per log_every steps, numbered checkpoints plus latest
    let log = fs::read_to_string(run.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count() as u64, c.train.steps / c.train.log_every);
    assert_eq!(parse_log(&log).last().unwrap().0, 20);
    assert!(run.join("checkpoints/step-00000010.pgt").exists());
    assert_eq!(outcome.checkpoint, latest_checkpoint(&run));
    assert!(run.join("loss.png").exists());
    // a second fresh run into the same directory is refused
    assert!(train(&c, &data, &run, None).is_err());

    let generated = tmp.path().join("generated");
    let m = sample_cmd(&outcome.checkpoint, &ConditionSource::Dataset(data.clone()), &c.sample, &generated).unwrap();
    assert_eq!(m.samples.len(), c.sample.count);
    m.verify(&generated).unwrap();
    for s in &m.samples {
        let (range, _) = read_range(&generated.join(&s.range)).unwrap();
        assert_eq!(range.sensor, c.data.world.sensor);
        assert!(s.condition.is_some());
    }

    // self-comparison: distances vanish
    let set = EvalSet::from_manifest(&data).unwrap();
    let self_report = evaluate(&set, &set, &c).unwrap();
    for name in ["frd", "fpd", "jsd"] {
        for r in Region::ALL {
            let v = self_report.get(name, r).unwrap();
            assert!(v.abs() < 1e-6, "{name}.{r} = {v}");
        }
    }

    let report = eval_cmd(&data, &generated, &c, &tmp.path().join("eval"), true, false).unwrap();
    for who in ["reference", "generated"] {
        let n = |r: Region| report.counts[&format!("points_{who}.{r}")];
        assert_eq!(n(Region::Front) + n(Region::Rear), n(Region::Full));
    }
    let text = fs::read_to_string(tmp.path().join("eval/report.txt")).unwrap();
    let parsed = MetricReport::parse(&text).unwrap();
    assert_eq!(parsed.values.len(), report.values.len());
    assert_eq!(parsed.config_hash, c.hash());
    assert!(tmp.path().join("eval/bev.png").exists());
    assert!(tmp.path().join("eval/metrics.png").exists());
}

#[test]
fn sensor_mismatch_between_checkpoint_and_condition_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(1, 2);
    let data = tmp.path().join("data");
    gen_data(&c, &data).unwrap();
    let run = train(&c, &data, &tmp.path().join("run"), None).unwrap();
    let mut wide = c.clone();
    wide.data.world.sensor.w = 128;
    let other = tmp.path().join("other");
    gen_data(&wide, &other).unwrap();
    let err = sample_cmd(&run.checkpoint, &ConditionSource::Dataset(other), &c.sample, &tmp.path().join("s")).unwrap_err();
    assert!(format!("{err:#}").contains("sensor"), "{err:#}");
    // training on a mismatched dataset fails the same way
    assert!(train(&c, &tmp.path().join("other"), &tmp.path().join("run2"), None).is_err());
}

#[test]
fn kitti_ingest_for_sampling_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(2, 2);
    let data = tmp.path().join("data");
    let m = gen_data(&c, &data).unwrap();
    let run = train(&c, &data, &tmp.path().join("run"), None).unwrap();

    // one PNG plus a calibration file as the only condition
    let sample = m.load_sample(&data, 0).unwrap();
    let view = &sample.views[0].view;
    let (h, w) = view.size();
    let bytes: Vec<u8> = view.image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let png = tmp.path().join("cam.png");
    image::RgbImage::from_raw(w as u32, h as u32, bytes).unwrap().save(&png).unwrap();
    let calib = tmp.path().join("calib.txt");
    fs::write(&calib, format_calib(&view.calib)).unwrap();
    let gen = tmp.path().join("gen");
    let g = sample_cmd(&run.checkpoint, &ConditionSource::Image { image: png, calib }, &c.sample, &gen).unwrap();
    assert_eq!(g.samples.len(), c.sample.count);
    assert!(g.samples.iter().all(|s| s.condition.is_none()));

    // directories of .bin files evaluate without camera metrics
    let (ka, kb) = (tmp.path().join("ka"), tmp.path().join("kb"));
    fs::create_dir_all(&ka).unwrap();
    fs::create_dir_all(&kb).unwrap();
    for (i, s) in m.load_all(&data).unwrap().iter().enumerate() {
        write_kitti_bin(&ka.join(format!("{i:06}.bin")), &s.cloud).unwrap();
    }
    for (i, s) in g.samples.iter().enumerate() {
        fs::copy(gen.join(&s.cloud), kb.join(format!("{i:06}.bin"))).unwrap();
    }
    let report = eval_cmd(&ka, &kb, &c, &tmp.path().join("eval"), false, true).unwrap();
    assert!(report.get("jsd", Region::Full).is_some());
    assert!(report.get("cm_dc", Region::Full).is_none());
    assert!(report.undefined.contains_key("cm_dc.full"));
}

#[test]
fn report_text_matches_golden() {
    let golden = "config_hash=abc\n\
                  count.generated=2\n\
                  tag.cm_lookup=bilinear\n\
                  undefined.cm_sc.rear=no_valid_projections\n\
                  metric=jsd region=full value=0.125 unit=bits\n\
                  metric=mmd region=front value=NaN unit=x1e4\n";
    let r = MetricReport::parse(golden).unwrap();
    assert_eq!(r.config_hash, "abc");
    assert_eq!(r.counts["generated"], 2);
    assert_eq!(r.tags["cm_lookup"], "bilinear");
    assert_eq!(r.get("jsd", Region::Full), Some(0.125));
    assert!(r.get("mmd", Region::Front).unwrap().is_nan());
    assert_eq!(r.to_text().unwrap(), golden);
}
