"""Writes a tiny randomly initialised OPT decoder plus reference logits.

The fixture lets the C++ tests compare the public-tensor-file loader and the
forward pass against the Hugging Face implementation without needing Python at
test time. Re-run only when the fixture format changes:

    python3 tools/make_opt_fixture.py tests/fixtures/opt_tiny
"""

import json
import pathlib
import sys

import torch
from safetensors.torch import save_file
from transformers import OPTConfig, OPTForCausalLM


def main(out_dir: str) -> None:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(1234)
    config = OPTConfig(
        vocab_size=48,
        hidden_size=16,
        num_hidden_layers=3,
        ffn_dim=40,
        num_attention_heads=4,
        max_position_embeddings=32,
        word_embed_proj_dim=16,
        do_layer_norm_before=True,
        activation_function="relu",
        dropout=0.0,
        attention_dropout=0.0,
        eos_token_id=2,
        bos_token_id=2,
        pad_token_id=1,
    )
    model = OPTForCausalLM(config).eval()
    # Default init leaves biases and norms at trivial values; perturb them so
    # the comparison covers every parameter.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or "layer_norm" in name:
                p.add_(0.1 * torch.randn_like(p))
            else:
                p.mul_(8.0)

    tokens = [2, 7, 31, 5, 5, 19, 44, 0, 12, 3, 8, 27]
    with torch.no_grad():
        logits = model(torch.tensor([tokens])).logits[0]

    state = {k: v.contiguous() for k, v in model.state_dict().items() if k != "lm_head.weight"}
    save_file(state, str(out / "model.safetensors"))
    config.save_pretrained(str(out))
    (out / "expected.json").write_text(
        json.dumps({"tokens": tokens, "logits": logits.tolist()}, indent=None) + "\n"
    )


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures/opt_tiny")
