from collections import Counter

import numpy as np
import pytest
import torch

from r3d2.engine import Card, GameConfig, initial_composition
from r3d2.qnet import EncoderConfig, init_params
from r3d2.textenc import build_vocab

CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")
    config.addinivalue_line("markers", "slow: long-running learning checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        _, outcomes = CRITERIA.setdefault(number, (title, []))
        outcomes.append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, outcomes = CRITERIA[number]
        status = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {title} ({len(outcomes)} checks)")


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


def tiny_encoder(vocab_size, **kw):
    defaults = dict(layers=1, model_dim=8, attention_heads=2, ffn_dim=16, max_seq_len=160)
    defaults.update(kw)
    return EncoderConfig(vocab_size=vocab_size, **defaults)


@pytest.fixture
def tiny_net(vocab):
    torch.manual_seed(0)
    return init_params(tiny_encoder(len(vocab)), seed=3)


def stacked_deck(config: GameConfig, hands, draws=()):
    """Deck whose deal produces `hands` and whose next draws are `draws`, in order."""
    order = [hands[p][slot] for slot in range(config.hand_size) for p in range(config.players)]
    order += list(draws)
    if Counter(order) - initial_composition(config):
        raise ValueError("stacked cards exceed the deck composition")
    rest = initial_composition(config) - Counter(order)
    return sorted(rest.elements()) + list(reversed(order))


def C(color: str, rank: int) -> Card:
    return Card("RYGWB".index(color), rank)


def synthetic_trajectory(rng: np.random.Generator, steps: int, vocab_size: int, players: int = 2):
    """Random token streams shaped like a per-seat episode."""
    from r3d2.replay import Trajectory

    obs, cands, acts = [], [], []
    for _ in range(steps):
        obs.append(rng.integers(2, vocab_size, size=int(rng.integers(1, 12))).astype(np.uint8))
        k = int(rng.integers(1, 6))
        rows = np.zeros((k, 4), dtype=np.uint8)
        for r in range(k):
            n = int(rng.integers(1, 5))
            rows[r, :n] = rng.integers(2, vocab_size, size=n)
        cands.append(rows)
        acts.append(int(rng.integers(k)))
    rewards = rng.integers(-1, 2, size=steps).astype(np.float32)
    return Trajectory(players, tuple(obs), tuple(cands), np.array(acts), rewards)


def write_policy(path, seed, algorithm="R3D2-S", settings=(2,), colors=2, ranks=5, **meta):
    """Untrained tiny checkpoint with the metadata a training run would record."""
    from r3d2.qnet import save_checkpoint

    vocab = build_vocab()
    net = init_params(tiny_encoder(len(vocab), max_seq_len=512), seed=seed)
    info = {
        "algorithm": algorithm,
        "settings": list(settings),
        "seed": seed,
        "colors": colors,
        "ranks": ranks,
        "template": {"last_action": True, "teammate_knowledge": True, "discards": True},
        **meta,
    }
    save_checkpoint(path, net, vocab, 0, info)
    return str(path)
