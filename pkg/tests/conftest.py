import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_attention(q, k, v):
    """Two-pass softmax attention in plain Python floats."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [sum(q[i, c] * k[j, c] for c in range(d)) / d ** 0.5 for j in range(k.shape[0])]
        top = max(logits)
        ex = [np.exp(s - top) for s in logits]
        z = sum(ex)
        for j, e in enumerate(ex):
            out[i] += (e / z) * v[j]
    return out


def planted_prompt(rng, n_q=8, d=32, relevant=3, irrelevant=61, scale=30.0, d_v=8):
    """Queries copying ``relevant`` prompt directions; the rest of the prompt is
    orthogonal to the query span.

    Returns ``(queries, prompt_keys, prompt_values, relevant_mask)``.
    """
    basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
    rel = basis[:relevant]
    queries = scale * np.sqrt(d) * rel[np.arange(n_q) % relevant]
    # irrelevant tokens live in the orthogonal complement of the relevant span
    comp = basis[relevant:]
    irr = rng.standard_normal((irrelevant, comp.shape[0])) @ comp
    irr /= np.linalg.norm(irr, axis=1, keepdims=True)
    prompt = np.concatenate([rel, irr])
    order = rng.permutation(prompt.shape[0])
    mask = order < relevant
    return (queries.astype(np.float32), prompt[order].astype(np.float32),
            rng.standard_normal((prompt.shape[0], d_v)).astype(np.float32), mask)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("]")[0].split("[")[1])):
            terminalreporter.write_line(line)
