//! Shared fixtures for the criterion benches.

use vtd_core::codebook::Codebook;
use vtd_core::dataset::{generate, sample_frames, Dataset, FrameMode, SampleMode, SyntheticSpec};
use vtd_core::encoders::{EncoderConfig, FrozenEncoderWeights};
use vtd_core::training::{
    compute_loss, forward_video, frame_inputs, CodebookOnTape, TrainConfig, TrainState,
};
use vtd_core::{Result, Tape};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub data: Dataset,
    pub state: TrainState,
    pub config: TrainConfig,
}

impl Fixture {
    /// Default-sized model on a 5-class set; `mode` selects embedding or pixel frames.
    pub fn new(mode: FrameMode) -> Self {
        let data = generate(&SyntheticSpec {
            videos_per_class: 4,
            mode,
            ..SyntheticSpec::default()
        })
        .expect("fixture dataset");
        let encoder = FrozenEncoderWeights::init(EncoderConfig::default(), 0).expect("encoder");
        Self {
            data,
            state: TrainState::init(encoder, 7),
            config: TrainConfig::default(),
        }
    }

    pub fn codebook(&self) -> Codebook {
        self.state.codebook(&self.data.labels, None).expect("codebook")
    }

    /// One optimizer step on the first `batch_size` videos: forward, backward, AdamW.
    pub fn train_step(&mut self) -> Result<f64> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tape = Tape::new();
        let vars = self.state.params.on_tape(&tape, true);
        let cb = CodebookOnTape::build(&tape, &self.data.labels, vars.text, &self.state.encoder, None)?;
        let settings = cfg.fusion_settings();
        let mut embeddings = Vec::new();
        let mut targets = Vec::new();
        for video in self.data.videos.iter().take(cfg.batch_size) {
            let idx = sample_frames(video.pool_size(), cfg.segments, SampleMode::Train, &mut rng)?;
            let frames = frame_inputs(video, &idx)?;
            let out = forward_video(&tape, &frames, &vars, &self.state.encoder, &cb, &settings, cfg.vote)?;
            embeddings.push(out.v_hat);
            targets.push(video.class);
        }
        let (loss, _) = compute_loss(&embeddings, cb.matrix, &targets, cfg.tau_loss)?;
        let value = loss.value().data()[0];
        let grads = tape.backward(loss)?;
        let grads = vars.gradients(&grads);
        self.state.adam_step(&grads, cfg)?;
        Ok(value)
    }
}
