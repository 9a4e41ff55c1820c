import numpy as np
import pytest
import torch
from hypothesis import settings

from mddllm.cohort import Label, Record, make_record
from mddllm.lm import ModelConfig, init_params
from mddllm.schema import default_schema, figure3_schema

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

torch.set_num_threads(1)

WORKED_CELLS = {
    "age": "60", "sex": "female", "bmi": "24.5018", "sleeplessness": "sometimes", "sleep_duration": "6",
    "alcohol": "3 / week", "self_harm": "never", "employment": "paid", "income": "45000",
    "work_hours": "38", "education": "O level", "illness": "no", "hdl": "2.075", "ldl": "2.6077",
    "tg": "1.334", "tc": "4.7848",
}

FIG3_CELLS = {
    "age": "47", "sex": "male", "sleeplessness": "sometimes", "sleep_duration": "9", "alcohol": "4 / week",
    "self_harm": "never", "employment": "paid", "work_hours": "17", "education": "A level",
    "income": "low", "hdl": "1.507", "ldl": "2.3299", "tg": "1.038", "tc": "4.7086",
}


@pytest.fixture
def schema():
    return default_schema()


@pytest.fixture
def fig3_schema():
    return figure3_schema()


@pytest.fixture
def worked_record(schema):
    return make_record(schema, "UKB-0001", WORKED_CELLS, Label.MDD)


@pytest.fixture
def fig3_record(fig3_schema):
    return make_record(fig3_schema, "FIG3", FIG3_CELLS, Label.HC)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=40, n_layer=2, n_head=2, d_model=16, d_mlp=32, context_len=32)


@pytest.fixture
def tiny_params64(tiny_config):
    return init_params(tiny_config, seed=3, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
