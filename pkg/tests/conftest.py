import random

import pytest
import torch

from cem.corpus import SPECIALS, Dialogue, Example, ContextSequence, Vocabulary, collate
from cem.knowledge import RELATIONS
from cem.model import CEM, ModelConfig

torch.set_num_threads(1)


def make_vocab(n):
    """Vocabulary of ``n`` entries: specials plus t0, t1, ..."""
    return Vocabulary(list(SPECIALS) + [f"t{i}" for i in range(n - len(SPECIALS))])


def random_example(rng, V, L, T, lk=(4, 9), emotions=32, min_len=2):
    ctx_len = rng.randint(min_len, L)
    ids = [2] + [rng.randrange(5, V) for _ in range(ctx_len - 1)]
    states = [0] + [rng.choice((1, 2)) for _ in range(ctx_len - 1)]
    kn = {}
    for r in RELATIONS:
        n = rng.randint(*lk)
        toks = [rng.randrange(5, V) for _ in range(n)]
        kn[r.value] = ([2] + toks[:-1]) if r.is_cognitive else toks
    target = [rng.randrange(5, V) for _ in range(rng.randint(1, T))]
    return Example(ContextSequence(ids, states, rng.randrange(emotions)), target, kn, ("x", 0))


def random_batch(seed, B=2, V=40, L=6, T=5, emotions=32):
    """B random examples; the first context has exactly L tokens."""
    rng = random.Random(seed)
    return collate([random_example(rng, V, L, T, emotions=emotions, min_len=L if i == 0 else 2)
                    for i in range(B)])


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=40, d_model=16, n_layers=1, n_heads=2, dropout=0.0)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return CEM(tiny_config).eval()


@pytest.fixture
def dialogue():
    return Dialogue("conv_1", "proud", (("speaker", "I passed my exam!"), ("listener", "That is great."),
                                        ("speaker", "Thanks, I worked hard."), ("listener", "You earned it.")))


@pytest.fixture(scope="session")
def small_experiment():
    from cem.corpus import generate_synthetic_corpus, split_dialogues
    from cem.pipeline import synthetic_experiment
    return synthetic_experiment(split_dialogues(generate_synthetic_corpus(40, 4, 0)))


SMALL_MODEL = dict(d_model=16, n_layers=1, n_heads=2, dropout=0.0)


ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Register one acceptance line; printed again in the terminal summary."""
    line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
