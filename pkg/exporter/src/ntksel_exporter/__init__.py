"""Real-model feature exporter for the ntksel selection engine.

Extracts mean final-layer hidden states and projected low-rank-adapter
gradients from causal language models, writing them in the engine's binary
container via an independent implementation of its published sign-generator
and accumulation contract.
"""
from .adapters import AdapterSet, LoraLinear, attach_adapters
from .export import (
    ExportJob,
    export_embeddings,
    export_gradients,
    load_model,
    warmup_adapters,
)
from .signgen import StreamingProjector, sign_block

__version__ = "0.1.0"
