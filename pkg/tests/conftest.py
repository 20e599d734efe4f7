import numpy as np
import pytest

from kgwalk.graph import START, build_graph
from kgwalk.kge import EmbeddingTable, KGEConfig, train_kge
from kgwalk.synthetic import planted_dataset
from kgwalk.trainer import PolicyConfig, train_policy

# settings under which the planted fixture is learnable within 50 epochs
PLANTED_KGE = dict(dim=32, epochs=200, lr=1e-2, batch_size=64, dropout=0.0)
PLANTED_POLICY = dict(hidden=64, epochs=50, batch_size=512, lr=1e-3, action_dropout=0.5, embed_dropout=0.1)


@pytest.fixture
def toy_graph():
    """Two users, three items, one attribute shared by i1 and i2."""
    return build_graph(
        [("u1", "i1"), ("u1", "i2"), ("u2", "i2")],
        [("i1", "genre", "rock"), ("i2", "genre", "rock")],
        items=["i3"],
    )


def random_graph(rng, n_users=3, n_items=4, n_attrs=3, p=0.4):
    inter = [(f"u{u}", f"i{i}") for u in range(n_users) for i in range(n_items) if rng.random() < p]
    if not inter:
        inter = [("u0", "i0")]
    trip = [(f"i{i}", f"r{rng.integers(2)}", f"a{a}") for i in range(n_items) for a in range(n_attrs) if rng.random() < p]
    return build_graph(inter, trip, items=[f"i{i}" for i in range(n_items)])


def train_planted(seed=0, reward_shaping=True, action_dropout=None, dataset=None, **policy_overrides):
    ds = dataset or planted_dataset()
    g = ds.build_graph()
    model, _ = train_kge(g, KGEConfig(seed=seed, **PLANTED_KGE))
    kw = dict(PLANTED_POLICY, seed=seed, reward_shaping=reward_shaping, **policy_overrides)
    if action_dropout is not None:
        kw["action_dropout"] = action_dropout
    result = train_policy(g, model, PolicyConfig(**kw))
    return ds, g, model, result


def random_table(rng, n_ent, n_rel, d):
    return EmbeddingTable(rng.normal(size=(n_ent, d)), rng.normal(size=(n_rel, d)))


def held_out_items(ds, g, name="test"):
    out = {}
    for u, i in getattr(ds.split, name):
        out.setdefault(g.entity_id(u), set()).add(g.entity_id(i))
    return out



def relative_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-7)
    return float(np.max(np.abs(a - b)) / scale)


def policy_grad_errors(seed, d=8, h=8, T=3, batch=4, eps=1e-5, coords=4):
    """Max relative error between analytic and central-difference gradients, per tensor.

    Each tensor is probed along one random direction and at ``coords`` random
    entries. The episode batch (candidates, dropout masks, choices) is recorded
    once and replayed, so the objective is a smooth function of the parameters.
    """
    from kgwalk.policy import Policy

    rng = np.random.default_rng(seed)
    g = random_graph(rng, n_users=3, n_items=5, n_attrs=3, p=0.5)
    table = random_table(rng, g.num_entities, g.num_relations, d)
    policy = Policy.initialize(table, h, rng)
    for v in policy.params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    users = rng.choice(g.users, size=batch)
    ep = policy.rollout(users, T, g, rng, action_dropout=0.3, embed_dropout=0.2, train=True)
    w = rng.normal(size=batch)
    _, logp, grads = policy.log_prob_and_grad(ep, w)
    assert np.allclose(logp, ep.log_probs)

    def J():
        return policy.log_prob_and_grad(ep, w)[0]

    errors = {}
    for key, X in policy.params.items():
        G = grads[key]
        v = rng.normal(size=X.shape)
        X += eps * v
        jp = J()
        X -= 2 * eps * v
        jm = J()
        X += eps * v
        num = [(jp - jm) / (2 * eps)]
        ana = [float(np.sum(G * v))]
        flat = X.reshape(-1)
        for idx in rng.choice(flat.size, size=min(coords, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + eps
            jp = J()
            flat[idx] = old - eps
            jm = J()
            flat[idx] = old
            num.append((jp - jm) / (2 * eps))
            ana.append(float(G.reshape(-1)[idx]))
        errors[key] = relative_error(ana, num)
    return errors


def write_raw_dataset(directory, seed=0):
    """Raw interactions / KG / item-entity matches for the planted fixture, in ingest format."""
    from kgwalk.data import write_tsv

    ds = planted_dataset(seed=seed)
    items = set(ds.items)
    write_tsv(directory / "interactions.tsv", ds.split.train + ds.split.test)
    write_tsv(directory / "kg.tsv", [(f"e_{h}", r, f"e_{t}" if t in items else t) for h, r, t in ds.triplets])
    write_tsv(directory / "matches.tsv", [(i, f"e_{i}") for i in ds.items])
    return directory / "interactions.tsv", directory / "kg.tsv", directory / "matches.tsv"


def write_config(path, directory, **overrides):
    inter, kg, matches = write_raw_dataset(directory)
    values = dict(
        interactions=inter, triplets=kg, matches=matches,
        data_dir=directory / "data", work_dir=directory / "work",
        kge_epochs=5, kge_batch=64, epochs=3, runs=2, hidden=16, dim=8,
    )
    values.update(overrides)
    path.write_text("# test run\n" + "".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
    return path


def exhaustive_paths(u, T, g, policy):
    """Every length-T walk from u with its log-probability, via the single-step API."""
    out = []

    def expand(state, rels, ents, lp):
        if len(rels) == T + 1:
            out.append((lp, tuple(ents), tuple(rels)))
            return
        rel, ent = g.actions(ents[-1])
        dist = policy.action_distribution(state, rel, ent)
        for r, e, pr in zip(rel.tolist(), ent.tolist(), dist):
            nxt = policy.encode_step(state, policy.action_embedding(r, e))
            expand(nxt, rels + [r], ents + [e], lp + np.log(pr))

    expand(policy.encode_initial(u), [START], [u], 0.0)
    out.sort(key=lambda x: (-x[0], x[1], x[2]))
    return out


# one status line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, list[tuple[str, str]]] = {}


def report(criterion: int, ok, detail: str) -> None:
    """Record a (partial) outcome; ``ok`` is True, False, "SKIP" or "INFO" (context only)."""
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    line = f"criterion {criterion:2d}: {status}  {detail}"
    print(line)
    ACCEPTANCE.setdefault(criterion, []).append((status, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in range(1, 11):
        parts = ACCEPTANCE.get(c)
        if not parts:
            tr.write_line(f"criterion {c:2d}: NOT RUN")
            continue
        statuses = {s for s, _ in parts} - {"INFO"}
        overall = "FAIL" if "FAIL" in statuses else ("SKIP" if statuses == {"SKIP"} else "PASS")
        tr.write_line(f"criterion {c:2d}: {overall}  " + "; ".join(f"[{s}] {d}" for s, d in parts))
