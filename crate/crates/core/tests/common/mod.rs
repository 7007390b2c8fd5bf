use hers_core::pipeline::PipelineConfig;

/// A configuration small enough to run every stage in about a second.
pub fn small_config() -> PipelineConfig {
    PipelineConfig {
        seed: 3,
        prompts_per_domain: 30,
        hidden: vec![16, 16],
        pretrain_steps: 60,
        pretrain_lr: 3e-3,
        expert_steps: 40,
        expert_lr: 3e-3,
        log_every: 10,
        diffusion_steps: 20,
        eval_real_samples: 60,
        eval_gen_samples: 40,
        ..PipelineConfig::default()
    }
}
