from ._mv2mae import (
    ConfigError,
    dump_config,
    gradcheck,
    generate_dataset,
    late_fuse,
    layerwise_lr,
    load_dataset,
    lr_at,
    motion_weights,
    patchify,
    random_mask,
    run,
    tube_mask,
    unpatchify,
)

__all__ = [
    "ConfigError",
    "dump_config",
    "gradcheck",
    "generate_dataset",
    "late_fuse",
    "layerwise_lr",
    "load_dataset",
    "lr_at",
    "motion_weights",
    "patchify",
    "random_mask",
    "run",
    "tube_mask",
    "unpatchify",
]
