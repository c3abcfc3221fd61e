use std::path::Path;

use anyhow::{Context, Result};
use panogen_core::io::kitti_bytes;
use panogen_core::rng::{mix, stream_rng, streams};
use panogen_core::synthworld::{generate_sample, Weather};

use crate::config::RunConfig;
use crate::dataset::{range_container, Manifest, ManifestKind, SampleEntry, StagedDir, CONFIG_FILE};

/// Weather of sample `i`, drawn from its own stream.
pub fn weather_of(config: &RunConfig, i: usize) -> Weather {
    let mut rng = stream_rng(mix(config.data.seed, i as u64), streams::DATASET);
    config.data.weather.draw(&mut rng)
}

/// Writes `config.data.samples` paired samples to `out`.
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let mut stage = StagedDir::create(out)?;
    stage.add(CONFIG_FILE, config.to_toml()?.as_bytes())?;
    let world = &config.data.world;
    let mut samples = Vec::with_capacity(config.data.samples);
    for i in 0..config.data.samples {
        let seed = config.data.seed + i as u64;
        let weather = weather_of(config, i);
        let s = generate_sample(world, seed, weather).with_context(|| format!("generating sample {i} (seed {seed})"))?;
        let id = format!("{i:06}");
        let prefix = format!("samples/{id}");
        let cloud = format!("{prefix}/cloud.bin");
        let range = format!("{prefix}/range.pgt");
        stage.add(&cloud, &kitti_bytes(&s.cloud))?;
        stage.add_container(&range, &range_container(&s.range_image, Some(&s.range_labels))?)?;
        let views = s
            .views
            .iter()
            .enumerate()
            .map(|(k, v)| stage.add_view(&prefix, k, &v.view, Some(&v.sem_map), Some(&v.depth_map)))
            .collect::<Result<Vec<_>>>()?;
        samples.push(SampleEntry {
            id,
            seed,
            weather: weather.as_str().to_string(),
            cloud,
            range,
            views,
            condition: None,
        });
    }
    stage.finish(Manifest {
        kind: ManifestKind::Dataset,
        config_hash: config.hash(),
        sensor: world.sensor,
        world: Some(world.clone()),
        samples,
        files: Default::default(),
        provenance: [("data_hash".to_string(), config.data_hash())].into(),
    })
}
