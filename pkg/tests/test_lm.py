import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from lm_oracles import (KINDS, batch_loss, central_difference, random_batch, relative_errors,
                        sample_coordinates)
from mddllm.lm import (ContextError, LoraConfig, LoraError, ModelConfig, TrainConfig, build_vocab,
                       decode_greedy, forward, gradients, init_params, lm_loss, lora_inject, lora_merge,
                       lr_at, quantize, quantize_base, train_sft, trainable_count)
from mddllm.lm.quant import BLOCK, LEVELS, quantized_nbytes
from mddllm.lm.tokenizer import Tokenizer, normalize
from mddllm.lm.train import encode_prompt, final_loss, make_batch, encode_example
from mddllm.promptgen import INSTRUCTION, SftRecord, TemplateKind


# --------------------------------------------------------------- tokenizer

def test_tokenize_digits_per_character():
    tok = build_vocab(["age is 60"])
    ids = tok.encode("Age is 60")
    assert [tok.vocab[i] for i in ids] == ["age", "is", "6", "0"]
    assert tok.decode(ids) == "age is 6 0"
    assert tok.encode("") == []


def test_unknown_words_map_to_unk():
    tok = build_vocab(["age is 60"])
    assert tok.encode("shoe") == [tok.unk_id]


def test_instruction_has_no_unknowns():
    tok = build_vocab([INSTRUCTION + "\nAge is 60\nanswer:", "Yes", "No"])
    assert tok.unk_id not in tok.encode(INSTRUCTION)


def test_empty_vocab_rejected():
    with pytest.raises(ValueError):
        Tokenizer(["<pad>", "<bos>", "<eos>", "<unk>"])


def test_vocab_file_round_trip(tmp_path):
    tok = build_vocab(["body mass index (BMI) is 24.5 kg/m²"])
    tok.save(tmp_path / "v.txt")
    again = Tokenizer.load(tmp_path / "v.txt")
    assert again.vocab == tok.vocab
    assert (tmp_path / "v.txt").read_text(encoding="utf-8").splitlines()[1] == "<bos>"


@given(st.text(alphabet="abcdefg XYZ0123456789.,:/²", max_size=40))
def test_round_trip_up_to_normalization(text):
    tok = build_vocab([text, "a"])
    assert tok.decode(tok.encode(text)) == normalize(text)


# ---------------------------------------------------------------- quantize

def test_constant_tensor_exact():
    t = torch.full((3, 50), 0.37)
    assert torch.equal(quantize(t).dequantize(), t)
    assert torch.equal(quantize(torch.zeros(130)).dequantize(), torch.zeros(130))


def test_blockwise_error_bound(rng):
    x = rng.normal(size=(37, 91)).astype(np.float32)
    q = quantize(x)
    codes = q.codes()[: x.size]
    assert codes.min() >= -LEVELS and codes.max() <= LEVELS
    rec = q.dequantize().numpy().reshape(-1)
    flat = x.reshape(-1)
    for b in range(0, flat.size, BLOCK):
        block = flat[b:b + BLOCK]
        bound = np.abs(block).max() / 14
        assert np.abs(rec[b:b + BLOCK] - block).max() <= bound * (1 + 1e-6)


def test_memory_arithmetic():
    assert quantized_nbytes((1024, 1024)) == 589_824
    assert quantized_nbytes((1024, 1024)) / (1024 * 1024 * 4) <= 0.15
    q = quantize(torch.randn(1024, 1024))
    assert q.nbytes == 589_824


# ------------------------------------------------------------------- model

def test_forward_shape_and_normalization(tiny_params64, rng):
    ids = rng.integers(0, 40, size=11)
    logits = forward(tiny_params64, ids)
    assert logits.shape == (11, 40)
    probs = torch.softmax(logits, -1).sum(-1)
    assert torch.all(torch.abs(probs - 1) <= 1e-12)


def test_causality(tiny_params64, rng):
    ids = rng.integers(0, 40, size=12)
    other = ids.copy()
    other[6:] = rng.permutation(other[6:])
    other[9] = (other[9] + 1) % 40
    a, b = forward(tiny_params64, ids), forward(tiny_params64, other)
    assert torch.equal(a[:6], b[:6])


def test_context_overflow(tiny_params64):
    with pytest.raises(ContextError):
        forward(tiny_params64, list(range(33)))


def test_loss_hand_cases():
    perfect = torch.full((1, 3, 5), -1e4, dtype=torch.float64)
    targets = torch.tensor([[1, 2, 3]])
    perfect[0, [0, 1, 2], [1, 2, 3]] = 0
    assert float(lm_loss(perfect, targets)) == pytest.approx(0, abs=1e-12)
    uniform = torch.zeros(1, 4, 50, dtype=torch.float64)
    assert float(lm_loss(uniform, torch.zeros(1, 4, dtype=torch.long))) == pytest.approx(math.log(50), abs=1e-12)
    two = torch.log(torch.tensor([[[0.5, 0.5, 0, 0], [0.25, 0.25, 0.25, 0.25]]], dtype=torch.float64) + 1e-300)
    loss = float(lm_loss(two, torch.tensor([[0, 3]])))
    assert loss == pytest.approx(-(math.log(0.5) + math.log(0.25)) / 2, abs=1e-12)
    assert round(loss, 4) == 1.0397


def test_all_masked_is_error():
    with pytest.raises(ValueError):
        lm_loss(torch.zeros(1, 2, 5), torch.zeros(1, 2, dtype=torch.long), torch.zeros(1, 2, dtype=torch.bool))


def test_gradients_match_finite_differences(tiny_config, tiny_params64, rng):
    batch = random_batch(tiny_config, rng)
    _, grads = gradients(tiny_params64, batch)
    weights = {k: tiny_params64[k].clone() for k in tiny_params64.tensors}
    coords = sample_coordinates(weights, 60, rng)
    assert {next(k for k in KINDS if n.endswith(k)) for n, _ in coords} == set(KINDS)
    numeric = central_difference(lambda: batch_loss(weights, tiny_config, batch), weights, coords)
    analytic = [grads[n].view(-1)[i].item() for n, i in coords]
    assert relative_errors(analytic, numeric).max() < 1e-4


def test_logit_gradients_sum_to_zero(rng):
    logits = torch.tensor(rng.normal(size=(2, 5, 7)), requires_grad=True)
    loss = lm_loss(logits, torch.as_tensor(rng.integers(0, 7, size=(2, 5))))
    (g,) = torch.autograd.grad(loss, logits)
    assert torch.all(torch.abs(g.sum(-1)) <= 1e-10)


def test_adapter_gradients_only(tiny_config, tiny_params64, rng):
    adapter = lora_inject(tiny_params64, LoraConfig(r=2), seed=1)
    _, grads = gradients(tiny_params64, random_batch(tiny_config, rng), adapter)
    assert set(grads) == set(adapter.tensors)


def test_adapter_gradients_match_finite_differences(tiny_config, tiny_params64, rng):
    adapter = lora_inject(tiny_params64, LoraConfig(r=2, targets=("q", "v", "up")), seed=1)
    # move B away from zero so gradients w.r.t. A are non-trivial
    adapter = type(adapter)(adapter.config, {k: (v + 0.05 * torch.randn(v.shape, dtype=v.dtype, generator=torch.Generator().manual_seed(0)))
                                             if k.endswith(".B") else v.clone() for k, v in adapter.tensors.items()})
    batch = random_batch(tiny_config, rng)
    _, grads = gradients(tiny_params64, batch, adapter)
    weights = {k: tiny_params64[k] for k in tiny_params64.tensors}
    coords = sample_coordinates(adapter.tensors, 30, rng, kinds=(".A", ".B"))
    numeric = central_difference(lambda: batch_loss(weights, tiny_config, batch, adapter), adapter.tensors, coords)
    analytic = [grads[n].view(-1)[i].item() for n, i in coords]
    assert relative_errors(analytic, numeric).max() < 1e-4


# -------------------------------------------------------------------- LoRA

def test_identity_at_init(tiny_params64, rng):
    adapter = lora_inject(tiny_params64, LoraConfig(), seed=0)
    ids = rng.integers(0, 40, size=10)
    assert torch.equal(forward(tiny_params64, ids, adapter), forward(tiny_params64, ids))


@pytest.mark.parametrize("d,layers,r,targets,expected", [
    (32, 2, 8, ("q", "v"), 2048),
    (16, 2, 4, ("q", "k", "v", "o"), 2 * 4 * 4 * 32),
    (16, 1, 2, ("up", "down"), 2 * (16 + 32) * 2),
])
def test_trainable_count(d, layers, r, targets, expected):
    config = ModelConfig(vocab_size=20, n_layer=layers, n_head=2, d_model=d, d_mlp=2 * d, context_len=8)
    adapter = lora_inject(init_params(config, 0), LoraConfig(r=r, targets=targets))
    assert trainable_count(adapter) == expected


def test_rank_zero_rejected():
    with pytest.raises(LoraError):
        LoraConfig(r=0)


def test_unknown_target_rejected(tiny_params64):
    with pytest.raises(LoraError):
        lora_inject(tiny_params64, LoraConfig(targets=("gate",)))


def _random_adapter(params, seed=0, r=4):
    adapter = lora_inject(params, LoraConfig(r=r), seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)
    return type(adapter)(adapter.config, {k: torch.randn(v.shape, generator=gen, dtype=v.dtype) * 0.1
                                          for k, v in adapter.tensors.items()})


def test_merge_matches_runtime(tiny_config, rng):
    params = init_params(tiny_config, seed=2)
    adapter = _random_adapter(params)
    ids = rng.integers(0, 40, size=16)
    merged = forward(lora_merge(params, adapter), ids)
    runtime = forward(params, ids, adapter)
    assert torch.max(torch.abs(merged - runtime)) <= 1e-6


def test_merge_zero_and_twice(tiny_params64):
    zero = lora_inject(tiny_params64, LoraConfig())
    merged = lora_merge(tiny_params64, zero)
    assert all(torch.equal(merged[k], tiny_params64[k]) for k in tiny_params64.tensors)
    adapter = _random_adapter(tiny_params64)
    once, twice = lora_merge(tiny_params64, adapter), lora_merge(lora_merge(tiny_params64, adapter), adapter)
    name = "h0.attn.q"
    assert torch.allclose(twice[name] - tiny_params64[name], 2 * (once[name] - tiny_params64[name]))


# ---------------------------------------------------------------- training

def test_lr_schedule():
    total = 100
    assert lr_at(0, total, 3e-4, 0.1) == 0
    assert lr_at(10, total, 3e-4, 0.1) == pytest.approx(3e-4)
    assert lr_at(total - 1, total, 3e-4, 0.1) <= 3e-4 / 90 + 1e-18


def _examples(n=24):
    out = []
    for i in range(n):
        yes = i % 2 == 0
        text = f"Age is {40 + i % 9}, sex is {'female' if yes else 'male'}"
        out.append(SftRecord(INSTRUCTION, text, "Yes" if yes else "No", f"p{i}", TemplateKind.TEXT))
    return out


def _setup(seed=0, d=32):
    ex = _examples()
    tok = build_vocab([INSTRUCTION, *(e.input for e in ex), "answer:", "Yes", "No"])
    config = ModelConfig(vocab_size=len(tok), n_layer=2, n_head=2, d_model=d, d_mlp=2 * d, context_len=64)
    return ex, tok, init_params(config, seed)


def test_answer_only_mask():
    ex, tok, _ = _setup()
    ids, start = encode_example(tok, ex[0])
    batch = make_batch([(ids, start)])
    picked = batch.targets[batch.mask].tolist()
    assert picked == [tok.encode("Yes")[0], tok.eos_id]


def test_training_leaves_base_untouched_and_is_deterministic():
    ex, tok, base = _setup()
    before = {k: v.clone() for k, v in base.tensors.items()}
    cfg = TrainConfig(peak_lr=1e-2, epochs=2, batch_size=8, seed=4)
    a1, h1 = train_sft(base, ex, tok, cfg, LoraConfig(r=4))
    a2, h2 = train_sft(base, ex, tok, cfg, LoraConfig(r=4))
    assert all(torch.equal(before[k], base.tensors[k]) for k in before)
    assert h1.loss == h2.loss and h1.lr == h2.lr
    assert all(torch.equal(a1.tensors[k], a2.tensors[k]) for k in a1.tensors)
    assert h1.lr[0] == 0


def test_epoch_loss_decreases():
    ex, tok, base = _setup()
    _, hist = train_sft(base, ex, tok, TrainConfig(peak_lr=1e-2, epochs=5, batch_size=8), LoraConfig())
    means = hist.epoch_mean_loss()
    assert means[-1] < means[0]


def test_decode_basics():
    ex, tok, base = _setup()
    prompt = encode_prompt(tok, ex[0].instruction, ex[0].input)
    assert decode_greedy(base, prompt, 0) == []
    assert decode_greedy(base, prompt, 5) == decode_greedy(base, prompt, 5)
    with pytest.raises(ContextError):
        decode_greedy(base, list(range(65)), 3)


def _pretrained(ex, tok, base):
    # a randomly initialised head caps logits well below what memorization needs,
    # so the adapter is fitted on top of a base that has seen the prompts
    from mddllm.lm import pretrain_base
    from mddllm.lm.train import prompt_text
    texts = [prompt_text(e.instruction, e.input) for e in ex]
    return pretrain_base(base, texts, tok, TrainConfig(peak_lr=1e-2, epochs=40, batch_size=8))[0]


MEMORIZE = TrainConfig(peak_lr=2e-2, batch_size=1, max_steps=200, epochs=200)


def test_memorization_and_decode():
    ex, tok, base = _setup()
    base = _pretrained(ex, tok, base)
    adapter, hist = train_sft(base, ex[:1], tok, MEMORIZE, LoraConfig())
    assert len(hist.loss) == 200
    assert final_loss(base, adapter, ex[:1], tok) < 0.01
    prompt = encode_prompt(tok, ex[0].instruction, ex[0].input)
    assert decode_greedy(base, prompt, 4, adapter) == [tok.encode("Yes")[0], tok.eos_id]


def test_quantized_memorization_close_to_dense():
    ex, tok, base = _setup()
    base = _pretrained(ex, tok, base)
    dense, _ = train_sft(base, ex[:1], tok, MEMORIZE, LoraConfig())
    qbase = quantize_base(base)
    quant, _ = train_sft(qbase, ex[:1], tok, MEMORIZE, LoraConfig())
    gap = abs(final_loss(base, dense, ex[:1], tok) - final_loss(qbase, quant, ex[:1], tok))
    assert gap <= 0.1


def test_quantized_base_trains():
    ex, tok, base = _setup()
    qbase = quantize_base(base)
    assert qbase.quantized
    adapter, hist = train_sft(qbase, ex, tok, TrainConfig(peak_lr=1e-2, epochs=1, batch_size=8), LoraConfig())
    assert all(math.isfinite(v) for v in hist.loss)
    assert qbase.nbytes() <= 0.3 * base.nbytes()
