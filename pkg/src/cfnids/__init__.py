"""Counterfactual explanations for network intrusion detection: mixed-type
diffusion with classifier guidance, a progressively distilled fast sampler,
a CVAE baseline, an evaluation suite, and global rule extraction."""

__version__ = "0.1.0"
