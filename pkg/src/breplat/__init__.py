"""breplat: B-Rep solids as per-surface latents - encode, generate, solidify, evaluate."""

__version__ = "0.1.0"
