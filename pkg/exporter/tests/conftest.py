import json

import pytest
import torch


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A byte-vocabulary causal LM small enough for CPU test runs."""
    from transformers import LlamaConfig, LlamaForCausalLM

    cfg = LlamaConfig(
        vocab_size=256,
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=2,
        num_attention_heads=4,
        num_key_value_heads=2,
        max_position_embeddings=256,
        tie_word_embeddings=False,
    )
    torch.manual_seed(0)
    model = LlamaForCausalLM(cfg)
    path = tmp_path_factory.mktemp("model") / "tiny"
    model.save_pretrained(path)
    return str(path)


def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return str(path)


@pytest.fixture()
def small_dataset(tmp_path):
    rows = [
        {"id": f"cand:{i}", "prompt": f"question {i}?", "response": f"answer {i}!"}
        for i in range(4)
    ]
    return write_jsonl(tmp_path / "data.jsonl", rows)
