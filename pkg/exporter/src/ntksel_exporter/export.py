"""Embedding and adapter-gradient export for causal language models.

Per sample, the gradient feature is the derivative of the summed output
logits over the response-token positions (all vocabulary coordinates) with
respect to the low-rank adapter parameters, streamed tensor by tensor
through the seeded sign projection, divided by the response token count,
scaled, and stored as float32 in the engine's binary container. Embeddings
are the mean over all sequence positions of the final layer's hidden
states.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .adapters import DEFAULT_TARGET_MODULES, AdapterSet, attach_adapters
from .container import (
    KIND_EMBEDDING,
    KIND_GRADIENT,
    Record,
    write_container,
)
from .data import Sample, byte_tokenizer, load_jsonl, split_sample_id
from .signgen import StreamingProjector

Tokenizer = Callable[[str], list[int]]


class ModelLoadError(Exception):
    pass


class TokenizationError(Exception):
    pass


class NonFiniteGradient(Exception):
    pass


class DivergenceError(Exception):
    pass


class OOMHint(Exception):
    """Out of memory; retry with a smaller batch or shorter sequences."""


@dataclass
class ExportJob:
    """Everything one export run needs; seeds and dims must match the
    engine run that will consume the files."""

    model_path: str
    dataset_path: str
    out_path: str
    proj_seed: int = 0
    proj_dim: int = 8192
    grad_scale: float = 1e-5
    rank: int = 16
    alpha: float | None = None
    target_modules: tuple[str, ...] = DEFAULT_TARGET_MODULES
    adapter_init_seed: int = 0
    adapter_checkpoint: str | None = None
    batch_size: int = 8
    device: str = "cpu"


def load_model(path: str) -> torch.nn.Module:
    try:
        from transformers import AutoModelForCausalLM

        model = AutoModelForCausalLM.from_pretrained(path)
    except Exception as e:
        raise ModelLoadError(f"could not load model from {path!r}: {e}") from e
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _tokenize(sample: Sample, tokenizer: Tokenizer, max_len: int | None):
    try:
        prompt_ids = tokenizer(sample.prompt)
        resp_ids = tokenizer(sample.response)
    except Exception as e:
        raise TokenizationError(f"sample {sample.id}: {e}") from e
    if not prompt_ids:
        raise TokenizationError(f"sample {sample.id}: empty prompt")
    if not resp_ids:
        raise TokenizationError(f"sample {sample.id}: empty response")
    total = len(prompt_ids) + len(resp_ids)
    if max_len is not None and total > max_len:
        raise TokenizationError(
            f"sample {sample.id}: {total} tokens exceeds model maximum {max_len}"
        )
    return prompt_ids, resp_ids


def _max_len(model) -> int | None:
    return getattr(model.config, "max_position_embeddings", None)


def _wrap_oom(e: RuntimeError) -> Exception:
    if "out of memory" in str(e).lower():
        return OOMHint(
            "model pass ran out of memory; lower batch_size or shorten sequences"
        )
    return e


def export_embeddings(
    job: ExportJob,
    model: torch.nn.Module | None = None,
    tokenizer: Tokenizer = byte_tokenizer,
) -> str:
    """One mean final-layer hidden state per sample; returns the file digest."""
    model = model if model is not None else load_model(job.model_path)
    if job.adapter_checkpoint:
        adapters = attach_adapters(
            model, job.rank, job.alpha, job.target_modules, job.adapter_init_seed
        )
        adapters.load_state_dict(torch.load(job.adapter_checkpoint, weights_only=True))
    model.eval()
    samples = load_jsonl(job.dataset_path)
    hidden = model.config.hidden_size
    max_len = _max_len(model)

    def records():
        for lo in range(0, len(samples), job.batch_size):
            batch = samples[lo : lo + job.batch_size]
            tokens = [sum(_tokenize(s, tokenizer, max_len), []) for s in batch]
            width = max(len(t) for t in tokens)
            ids = torch.zeros(len(batch), width, dtype=torch.long)
            mask = torch.zeros(len(batch), width, dtype=torch.long)
            for r, t in enumerate(tokens):
                ids[r, : len(t)] = torch.tensor(t)
                mask[r, : len(t)] = 1
            try:
                with torch.no_grad():
                    out = model(
                        ids.to(job.device),
                        attention_mask=mask.to(job.device),
                        output_hidden_states=True,
                    )
            except RuntimeError as e:
                raise _wrap_oom(e) from e
            last = out.hidden_states[-1].cpu()
            for r, s in enumerate(batch):
                n = int(mask[r].sum())
                vec = last[r, :n].mean(dim=0).to(torch.float32).numpy()
                tag, index = split_sample_id(s.id)
                yield Record(tag, index, 1, vec)

    empty = iter(()) if not samples else records()
    return write_container(job.out_path, KIND_EMBEDDING, hidden, empty)


def _project_gradient(
    grads: Sequence[torch.Tensor], job: ExportJob, param_count: int
) -> np.ndarray:
    proj = StreamingProjector(job.proj_seed, param_count, job.proj_dim)
    offset = 0
    for g in grads:
        flat = g.detach().to(torch.float64).cpu().numpy().ravel()
        proj.add(offset, flat)
        offset += flat.shape[0]
    return proj.finalize()


def export_gradients(
    job: ExportJob,
    model: torch.nn.Module | None = None,
    tokenizer: Tokenizer = byte_tokenizer,
) -> str:
    """Projected summed-logit adapter gradients, one record per sample."""
    model = model if model is not None else load_model(job.model_path)
    adapters = attach_adapters(
        model, job.rank, job.alpha, job.target_modules, job.adapter_init_seed
    )
    if job.adapter_checkpoint:
        adapters.load_state_dict(torch.load(job.adapter_checkpoint, weights_only=True))
    model.eval()
    samples = load_jsonl(job.dataset_path)
    params = adapters.parameters()
    p_total = adapters.param_count
    max_len = _max_len(model)

    def records():
        for s in samples:
            prompt_ids, resp_ids = _tokenize(s, tokenizer, max_len)
            ids = torch.tensor([prompt_ids + resp_ids], device=job.device)
            try:
                logits = model(ids).logits
                target = logits[0, len(prompt_ids) :, :].sum()
                grads = torch.autograd.grad(target, params)
            except RuntimeError as e:
                raise _wrap_oom(e) from e
            seq_len = len(resp_ids)
            vec = _project_gradient(grads, job, p_total)
            vec = vec / seq_len * job.grad_scale
            if not np.isfinite(vec).all():
                raise NonFiniteGradient(f"sample {s.id} produced non-finite features")
            tag, index = split_sample_id(s.id)
            yield Record(tag, index, seq_len, vec.astype(np.float32))

    digest = write_container(
        job.out_path,
        KIND_GRADIENT,
        job.proj_dim,
        records(),
        proj_seed=job.proj_seed,
        source_param_dim=p_total,
        normalized=True,
        scaled=True,
    )
    manifest = {
        "model": job.model_path,
        "adapter": {
            "rank": job.rank,
            "alpha": job.alpha if job.alpha is not None else job.rank,
            "target_modules": list(job.target_modules),
            "init_seed": job.adapter_init_seed,
            "checkpoint": job.adapter_checkpoint,
            "param_count": p_total,
            "layout": adapters.layout(),
        },
        "proj_seed": job.proj_seed,
        "proj_dim": job.proj_dim,
        "grad_scale": job.grad_scale,
        "normalization": "response_token_count",
        "gradient_target": "response_logit_sum",
        "sha256": digest,
    }
    Path(str(job.out_path) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return digest


def warmup_adapters(
    job: ExportJob,
    steps: int,
    lr: float = 1e-3,
    model: torch.nn.Module | None = None,
    tokenizer: Tokenizer = byte_tokenizer,
    checkpoint_path: str | None = None,
) -> tuple[str, list[float]]:
    """Short adapter-only training on the job's (domain) dataset.

    Full-batch steps of next-token cross-entropy over response positions.
    Returns the checkpoint path and the per-step losses; with steps=0 the
    checkpoint equals initialization.
    """
    model = model if model is not None else load_model(job.model_path)
    adapters = attach_adapters(
        model, job.rank, job.alpha, job.target_modules, job.adapter_init_seed
    )
    samples = load_jsonl(job.dataset_path)
    if not samples:
        raise ValueError("warm-up needs a non-empty dataset")
    max_len = _max_len(model)
    tokenized = [_tokenize(s, tokenizer, max_len) for s in samples]
    opt = torch.optim.AdamW(adapters.parameters(), lr=lr)
    losses: list[float] = []
    model.train()
    for step in range(steps):
        opt.zero_grad()
        total = torch.zeros(())
        for prompt_ids, resp_ids in tokenized:
            ids = torch.tensor([prompt_ids + resp_ids], device=job.device)
            logits = model(ids).logits
            pred = logits[0, len(prompt_ids) - 1 : -1, :]
            tgt = ids[0, len(prompt_ids) :]
            total = total + torch.nn.functional.cross_entropy(pred, tgt)
        loss = total / len(tokenized)
        if not torch.isfinite(loss):
            raise DivergenceError(f"warm-up loss became non-finite at step {step}")
        losses.append(float(loss.detach()))
        loss.backward()
        opt.step()
    model.eval()
    path = checkpoint_path or str(Path(job.out_path).with_suffix(".adapters.pt"))
    torch.save(adapters.state_dict(), path)
    return path, losses
