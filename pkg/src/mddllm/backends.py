"""Classification backends: the local tiny LM and remote completion endpoints.

Every backend exposes ``sequence_loglik(prompt, continuation)``; class
probabilities are the two verbalization likelihoods normalized against each
other in log space.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np

from .lm.lora import LoraAdapter
from .lm.model import ModelParams
from .lm.tokenizer import Tokenizer
from .lm.train import continuation_logliks, decode_greedy, prompt_text

VERBALIZATIONS = ("Yes", "No")
API_KEY_ENV = "MDDLLM_API_KEY"
RATIONALE_INSTRUCTION = "Please explain the reasons for this prediction and give the probability of this determination."


class BackendError(RuntimeError):
    pass


class CapabilityError(BackendError):
    pass


class TransportError(BackendError):
    pass


class PermanentError(BackendError):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class DecodeError(BackendError):
    def __init__(self, field_name: str, detail: str = ""):
        super().__init__(f"response is missing field {field_name!r}" + (f" ({detail})" if detail else ""))
        self.field = field_name


@dataclass(frozen=True)
class ClassScore:
    p_yes: float
    p_no: float
    loglik_yes: float
    loglik_no: float
    source: str


def normalize_scores(loglik_yes: float, loglik_no: float, source: str = "") -> ClassScore:
    """``p_yes = exp(ll_yes) / (exp(ll_yes) + exp(ll_no))`` without leaving log space."""
    if not (math.isfinite(loglik_yes) or math.isfinite(loglik_no)):
        raise BackendError("both class log-likelihoods are -inf")
    # logistic of the difference, evaluated on the side where exp cannot overflow
    d = loglik_yes - loglik_no
    small = math.exp(-abs(d))
    big_p, small_p = 1.0 / (1.0 + small), small / (1.0 + small)
    p_yes, p_no = (big_p, small_p) if d >= 0 else (small_p, big_p)
    return ClassScore(p_yes, p_no, float(loglik_yes), float(loglik_no), source)


@dataclass(frozen=True)
class Rationale:
    prediction: str
    free_text: str
    parsed_probability: float | None


_PERCENT = re.compile(r"(?<![\d.])(\d{1,3}(?:\.\d+)?)\s*%")
_FRACTION = re.compile(r"(?<![\d.])(0?\.\d+|1\.0+)(?![\d.%])")


def parse_probability(text: str) -> float | None:
    """First ``NN%`` literal, else first ``0.NN`` literal, as a fraction; ``None`` if absent."""
    m = _PERCENT.search(text)
    if m and float(m.group(1)) <= 100:
        return float(m.group(1)) / 100.0
    m = _FRACTION.search(text)
    if m:
        return float(m.group(1))
    return None


class Backend(Protocol):
    name: str
    logprobs: bool
    free_text: bool

    def sequence_loglik(self, prompt: str, continuation: str) -> float: ...

    def generate(self, prompt: str, max_new: int) -> str: ...


# ------------------------------------------------------------------ local

class LocalBackend:
    """Teacher-forced likelihoods from a (possibly adapted) local model.

    Prompts are tokenized with a leading BOS; continuations without one.
    """

    logprobs = True
    free_text = True

    def __init__(self, params: ModelParams, tokenizer: Tokenizer, adapter: LoraAdapter | None = None,
                 name: str = "local", batch_size: int = 32):
        self.params = params.dense() if params.quantized else params
        self.tokenizer = tokenizer
        self.adapter = adapter
        self.name = name
        self.batch_size = batch_size

    def _prompt_ids(self, prompt: str) -> list[int]:
        return [self.tokenizer.bos_id, *self.tokenizer.encode(prompt)]

    def sequence_logliks(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        encoded = [(self._prompt_ids(p), self.tokenizer.encode(c)) for p, c in pairs]
        return continuation_logliks(self.params, encoded, self.adapter, self.batch_size)

    def sequence_loglik(self, prompt: str, continuation: str) -> float:
        return float(self.sequence_logliks([(prompt, continuation)])[0])

    def generate(self, prompt: str, max_new: int) -> str:
        ids = decode_greedy(self.params, self._prompt_ids(prompt), max_new, self.adapter, stop_ids=(self.tokenizer.eos_id,))
        return self.tokenizer.decode(ids)


# ----------------------------------------------------------------- remote

def request_key(url: str, body: dict) -> str:
    canon = json.dumps({"url": url, "body": body}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


class HttpTransport:
    """POST with a disk cache and bounded exponential-backoff retries on 429/5xx.

    The cache holds one JSON file per request hash with the request body,
    the response body verbatim and a timestamp.  A warm cache never touches
    the network.  ``client`` and ``sleep`` are test seams.
    """

    def __init__(self, cache_dir: str | Path | None = None, api_key_env: str = API_KEY_ENV,
                 client: httpx.Client | None = None, max_retries: int = 4, backoff: float = 0.5,
                 timeout: float = 60.0, sleep: Callable[[float], None] = time.sleep):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.api_key_env = api_key_env
        self._client = client
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self.sleep = sleep
        self.network_calls = 0
        self._lock = threading.Lock()

    @property
    def client(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(timeout=self.timeout)
        return self._client

    def _cache_path(self, key: str) -> Path | None:
        return self.cache_dir / f"{key}.json" if self.cache_dir else None

    def cached(self, url: str, body: dict) -> str | None:
        path = self._cache_path(request_key(url, body))
        if path is not None and path.exists():
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        return None

    def _store(self, url: str, body: dict, response: str) -> None:
        path = self._cache_path(request_key(url, body))
        if path is None:
            return
        entry = {"url": url, "request": body, "response": response, "timestamp": time.time()}
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp{threading.get_ident()}")
            tmp.write_text(json.dumps(entry, sort_keys=True), encoding="utf-8")
            os.replace(tmp, path)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def post(self, url: str, body: dict) -> dict:
        text = self.cached(url, body)
        fresh = text is None
        if fresh:
            text = self._post_with_retries(url, body)
        try:
            parsed = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DecodeError("<body>", f"invalid JSON: {exc}") from None
        if fresh:
            self._store(url, body, text)
        return parsed

    def _post_with_retries(self, url: str, body: dict) -> str:
        last = ""
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            with self._lock:
                self.network_calls += 1
            try:
                resp = self.client.post(url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last = str(exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise PermanentError(resp.status_code, resp.text)
            return resp.text
        raise TransportError(f"{url}: retry budget of {self.max_retries} exhausted ({last})")


def _field(obj, path: str):
    cur = obj
    for part in path.split("."):
        m = re.fullmatch(r"(\w+)\[(\d+)\]", part)
        key, idx = (m.group(1), int(m.group(2))) if m else (part, None)
        if not isinstance(cur, dict) or key not in cur or cur[key] is None:
            raise DecodeError(path)
        cur = cur[key]
        if idx is not None:
            if not isinstance(cur, list) or len(cur) <= idx:
                raise DecodeError(path)
            cur = cur[idx]
    return cur


class RemoteBackend:
    """Completions-style endpoint returning echoed per-token logprobs."""

    free_text = True

    def __init__(self, url: str, model: str, transport: HttpTransport | None = None,
                 logprobs: bool = True, concurrency: int = 4, name: str | None = None):
        self.url = url
        self.model = model
        self.transport = transport or HttpTransport()
        self.logprobs = logprobs
        self.concurrency = concurrency
        self.name = name or f"remote:{model}"

    def complete(self, prompt: str, max_tokens: int, echo: bool) -> dict:
        body = {"model": self.model, "prompt": prompt, "max_tokens": max_tokens,
                "temperature": 0, "logprobs": True, "echo": echo}
        return self.transport.post(self.url, body)

    def sequence_loglik(self, prompt: str, continuation: str) -> float:
        if not self.logprobs:
            raise CapabilityError(f"{self.name} does not return token logprobs")
        resp = self.complete(prompt + continuation, 0, True)
        offsets = _field(resp, "choices[0].logprobs.text_offset")
        logprobs = _field(resp, "choices[0].logprobs.token_logprobs")
        if len(offsets) != len(logprobs):
            raise DecodeError("choices[0].logprobs.token_logprobs", "length differs from text_offset")
        total, seen = 0.0, False
        for off, lp in zip(offsets, logprobs):
            if off >= len(prompt):
                if lp is None:
                    raise DecodeError("choices[0].logprobs.token_logprobs", "null logprob in continuation")
                total += float(lp)
                seen = True
        if not seen:
            raise DecodeError("choices[0].logprobs.token_logprobs", "no continuation tokens echoed")
        return total

    def sequence_logliks(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        with ThreadPoolExecutor(max_workers=max(1, self.concurrency)) as pool:
            return np.array(list(pool.map(lambda pc: self.sequence_loglik(*pc), pairs)))

    def generate(self, prompt: str, max_new: int) -> str:
        return str(_field(self.complete(prompt, max_new, False), "choices[0].text"))


class RemoteChatClient:
    """Chat-completions client for remote narrative prompts, sharing the cached transport."""

    def __init__(self, url: str, model: str, transport: HttpTransport | None = None, max_tokens: int = 512):
        self.url = url
        self.model = model
        self.transport = transport or HttpTransport()
        self.max_tokens = max_tokens

    def chat(self, messages: list[dict]) -> str:
        body = {"model": self.model, "messages": messages, "max_tokens": self.max_tokens, "temperature": 0}
        return str(_field(self.transport.post(self.url, body), "choices[0].message.content"))


# ------------------------------------------------------- classification

def classify(backend, prompt: str, verbalizations: tuple[str, str] = VERBALIZATIONS) -> ClassScore:
    if not getattr(backend, "logprobs", False):
        raise CapabilityError(f"{backend.name} cannot score continuations")
    yes, no = verbalizations
    return normalize_scores(backend.sequence_loglik(prompt, yes), backend.sequence_loglik(prompt, no), backend.name)


def classify_many(backend, prompts: Sequence[str],
                  verbalizations: tuple[str, str] = VERBALIZATIONS) -> list[ClassScore]:
    """Batched ``classify``; identical results to calling it per prompt."""
    if not getattr(backend, "logprobs", False):
        raise CapabilityError(f"{backend.name} cannot score continuations")
    pairs = [(p, v) for p in prompts for v in verbalizations]
    ll = np.asarray(backend.sequence_logliks(pairs)).reshape(-1, 2)
    return [normalize_scores(float(a), float(b), backend.name) for a, b in ll]


def sft_prompt(instruction: str, input_text: str) -> str:
    """The prompt a fine-tuned model sees before its answer."""
    return prompt_text(instruction, input_text)


def classify_with_rationale(backend, prompt: str, max_new: int = 64,
                            verbalizations: tuple[str, str] = VERBALIZATIONS) -> tuple[ClassScore, Rationale]:
    """``classify`` plus a follow-up request for an explanation.

    The parsed probability is informational; the returned ClassScore is the
    likelihood-based one.
    """
    score = classify(backend, prompt, verbalizations)
    prediction = verbalizations[0] if score.p_yes >= 0.5 else verbalizations[1]
    if not getattr(backend, "free_text", False):
        raise CapabilityError(f"{backend.name} cannot generate free text")
    follow_up = f"{prompt} {prediction}\n{RATIONALE_INSTRUCTION}\n"
    try:
        text = backend.generate(follow_up, max_new)
    except Exception as exc:  # best effort: the score stands on its own
        warnings.warn(f"rationale generation failed: {exc}", RuntimeWarning, stacklevel=2)
        return score, Rationale(prediction, "", None)
    return score, Rationale(prediction, text, parse_probability(text))
