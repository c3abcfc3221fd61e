use panogen_cli::RunConfig;

/// A run small enough for debug-speed tests: base width 4, a handful of
/// samples and steps.
pub fn small_config(samples: usize, steps: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.samples = samples;
    c.model.denoiser.base = 4;
    c.train.steps = steps;
    c.train.warmup = 5;
    c.train.log_every = 5;
    c.train.checkpoint_every = 10;
    c.sample.count = 3;
    c.sample.steps = 3;
    c.sample.batch = 2;
    c
}
