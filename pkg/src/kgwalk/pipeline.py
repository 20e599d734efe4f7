"""Stage orchestration: ingest, train-kge, train-policy, recommend, evaluate.

Layout under ``work_dir``::

    run_<k>/kge.bin            DistMult embeddings (seed = master + k)
    run_<k>/policy.bin         walk policy
    run_<k>/reward_curve.tsv   step, minutes, mean_reward
    run_<k>/recs_path.jsonl    Ekar lists (path probability)
    run_<k>/recs_reward.jsonl  Ekar* lists (shaped reward)
    metrics_<model>.tsv        per-run and mean HR@k / NDCG@k
    patterns.tsv               path-pattern shares of run_0's Ekar lists

Every stage writes ``<stage>.stamp`` (JSON with stage hash, config hash and
seed) next to its artifacts and is skipped when the stamp matches. A failing
stage leaves ``<stage>.failed`` and whatever it had written.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

from .config import RunConfig, file_digest, stage_hash
from .data import Dataset, ingest, write_tsv
from .errors import DataError
from .graph import START, IntegratedGraph
from .inference import beam_search, dedup, rank, read_jsonl, to_record, write_jsonl
from .kge import EmbeddingTable, KGEConfig, make_score_model, train_kge
from .metrics import (
    ItemKNN,
    MetricReport,
    evaluate_lists,
    kge_rec_recommend,
    path_pattern_stats,
    patterns_to_tsv,
)
from .policy import Policy
from .trainer import PolicyConfig, train_policy

log = logging.getLogger(__name__)

MODELS = ("ekar", "ekar-star", "itemknn", "kge-rec")
RECS_FILES = {"path": "recs_path.jsonl", "reward": "recs_reward.jsonl"}


class Stamp:
    """Sidecar marker recording which configuration produced a stage's artifacts."""

    def __init__(self, directory: Path, stage: str):
        self.path = directory / f"{stage}.stamp"
        self.failed = directory / f"{stage}.failed"

    def read(self) -> dict | None:
        try:
            return json.loads(self.path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return None

    def matches(self, h: str, artifacts) -> bool:
        s = self.read()
        return s is not None and s.get("hash") == h and all(Path(a).exists() for a in artifacts)

    def write(self, stage: str, h: str, cfg: RunConfig, seed: int, artifacts) -> None:
        body = {
            "stage": stage,
            "hash": h,
            "config_hash": cfg.hash(),
            "seed": seed,
            "artifacts": sorted(Path(a).name for a in artifacts),
        }
        self.path.write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        self.failed.unlink(missing_ok=True)


class Pipeline:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.work = Path(cfg.work_dir)
        self.data_dir = Path(cfg.data_dir)
        self._dataset: Dataset | None = None
        self._graphs: dict[int, IntegratedGraph] = {}
        self.executed: list[str] = []

    # -- helpers ----------------------------------------------------------

    def run_dir(self, run: int) -> Path:
        d = self.work / f"run_{run}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            if not (self.data_dir / "train.tsv").exists():
                raise DataError(f"no prepared dataset in {self.data_dir}; run ingest first")
            self._dataset = Dataset.load(self.data_dir)
        return self._dataset

    def graph(self, run: int) -> IntegratedGraph:
        if run not in self._graphs:
            self._graphs[run] = self.dataset.build_graph(
                self.cfg.use_kg, self.cfg.max_fanout, fanout_seed=self.cfg.run_seed(run)
            )
        return self._graphs[run]

    def _data_hash(self) -> str:
        return "".join(file_digest(self.data_dir / f) for f in ("train.tsv", "valid.tsv", "test.tsv", "kg.tsv", "items.tsv"))

    def _stage(self, stage: str, directory: Path, h: str, seed: int, artifacts, body, force: bool) -> bool:
        stamp = Stamp(directory, stage)
        if not force and stamp.matches(h, artifacts):
            log.info("%s: up to date (%s)", stage, h)
            return False
        log.info("%s: running", stage)
        try:
            body()
        except BaseException as exc:
            stamp.failed.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
            raise
        stamp.write(stage, h, self.cfg, seed, artifacts)
        self.executed.append(f"{stage}@{directory.name}")
        return True

    def _held_out(self, graph: IntegratedGraph, name: str) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for u, i in getattr(self.dataset.split, name):
            out.setdefault(graph.entity_id(u), set()).add(graph.entity_id(i))
        return out

    def _exclusions(self, graph: IntegratedGraph) -> dict[int, set[int]]:
        """Training and validation items of each test user."""
        valid = self._held_out(graph, "valid")
        return {u: set(graph.user_items(u).tolist()) | valid.get(u, set()) for u in self._held_out(graph, "test")}

    def _hashes(self, run: int) -> dict[str, str]:
        cfg = self.cfg
        data = self._data_hash()
        kge = stage_hash(cfg, "train-kge", data, extra=cfg.run_seed(run))
        pol = stage_hash(cfg, "train-policy", kge)
        rec = stage_hash(cfg, "recommend", pol)
        return {"train-kge": kge, "train-policy": pol, "recommend": rec}

    # -- stages -----------------------------------------------------------

    def ingest(self, force: bool = False) -> bool:
        cfg = self.cfg
        inputs = [cfg.interactions, cfg.triplets, cfg.matches]
        if not all(inputs):
            if (self.data_dir / "train.tsv").exists():
                log.info("ingest: no raw inputs configured, using prepared data in %s", self.data_dir)
                return False
            raise DataError("ingest needs interactions, triplets and matches paths")
        for p in inputs:
            if not Path(p).exists():
                raise DataError("file not found", path=p)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        h = stage_hash(cfg, "ingest", extra=[file_digest(p) for p in inputs])
        artifacts = [self.data_dir / f"{n}.tsv" for n in ("train", "valid", "test", "kg", "items", "stats")]

        def body():
            self._dataset = ingest(cfg.interactions, cfg.triplets, cfg.matches, self.data_dir, cfg.seed)
            self._graphs.clear()

        return self._stage("ingest", self.data_dir, h, cfg.seed, artifacts, body, force)

    def kge_config(self, run: int) -> KGEConfig:
        c = self.cfg
        return KGEConfig(
            dim=c.dim, epochs=c.kge_epochs, negatives=c.kge_negatives, lr=c.kge_lr, dropout=c.kge_dropout,
            batch_size=c.kge_batch, seed=c.run_seed(run), variant=c.kge_variant, include_interactions=c.kge_interactions,
        )

    def policy_config(self, run: int) -> PolicyConfig:
        c = self.cfg
        return PolicyConfig(
            hidden=c.hidden, epochs=c.epochs, batch_size=c.batch, max_len=c.max_len,
            action_dropout=c.action_dropout, embed_dropout=c.embed_dropout, lr=c.lr, seed=c.run_seed(run),
            reward_shaping=c.reward_shaping, freeze_embeddings=c.freeze_embeddings, grad_clip=c.grad_clip,
            baseline=c.baseline, val_k=c.k, val_beam=c.beam, val_users=c.val_users,
        )

    def train_kge(self, run: int = 0, force: bool = False) -> bool:
        h = self._hashes(run)["train-kge"]
        d = self.run_dir(run)
        out = d / "kge.bin"

        def body():
            model, _ = train_kge(self.graph(run), self.kge_config(run))
            model.table.save(out)

        return self._stage("train-kge", d, h, self.cfg.run_seed(run), [out], body, force)

    def load_score_model(self, run: int):
        return make_score_model(self.cfg.kge_variant, EmbeddingTable.load(self.work / f"run_{run}" / "kge.bin"))

    def train_policy(self, run: int = 0, force: bool = False) -> bool:
        h = self._hashes(run)["train-policy"]
        d = self.run_dir(run)
        out, curve = d / "policy.bin", d / "reward_curve.tsv"

        def body():
            graph = self.graph(run)
            model = self.load_score_model(run)
            result = train_policy(graph, model, self.policy_config(run), valid=self._held_out(graph, "valid"))
            result.policy.save(out)
            write_tsv(curve, [("step", "minutes", "mean_reward")] + [
                (s, f"{m:.4f}", f"{r:.6f}") for s, m, r in result.curve
            ])

        return self._stage("train-policy", d, h, self.cfg.run_seed(run), [out, curve], body, force)

    def recommend(self, run: int = 0, force: bool = False) -> bool:
        h = self._hashes(run)["recommend"]
        d = self.run_dir(run)
        outs = {s: d / f for s, f in RECS_FILES.items()}

        def body():
            lists = self.recommendations(run)
            for strategy, path in outs.items():
                write_jsonl(path, lists[strategy])

        return self._stage("recommend", d, h, self.cfg.run_seed(run), list(outs.values()), body, force)

    def recommendations(self, run: int, users=None) -> dict[str, list[dict]]:
        """JSON records for both ranking strategies from one beam search per user."""
        c = self.cfg
        graph = self.graph(run)
        model = self.load_score_model(run)
        policy = Policy.load(self.work / f"run_{run}" / "policy.bin")
        excl = self._exclusions(graph)
        if users is None:
            users = sorted(excl)
        out: dict[str, list[dict]] = {s: [] for s in RECS_FILES}
        for u in users:
            paths = dedup(beam_search(u, c.max_len, c.beam, graph, policy), graph)
            ex = excl.get(u, set(graph.user_items(u).tolist()))
            for strategy in RECS_FILES:
                out[strategy].append(to_record(rank(paths, strategy, model, u, c.k, ex), graph))
        return out

    def evaluate(self, models=MODELS, force: bool = False) -> dict[str, MetricReport]:
        c = self.cfg
        artifacts = [self.work / f"metrics_{m}.tsv" for m in models]
        if any(m in ("ekar", "ekar-star") for m in models):
            artifacts.append(self.work / "patterns.tsv")
        upstream = "".join(self._hashes(r)["recommend"] for r in range(c.runs))
        h = stage_hash(c, "evaluate", upstream, extra=sorted(models))
        reports: dict[str, MetricReport] = {}

        def body():
            for m in models:
                reports[m] = self.evaluate_model(m)
                (self.work / f"metrics_{m}.tsv").write_text(reports[m].to_tsv(), encoding="utf-8")
            if self.work / "patterns.tsv" in artifacts:
                (self.work / "patterns.tsv").write_text(patterns_to_tsv(self.patterns(0)), encoding="utf-8")

        self.work.mkdir(parents=True, exist_ok=True)
        self._stage("evaluate", self.work, h, c.seed, artifacts, body, force)
        return reports

    def evaluate_model(self, model: str) -> MetricReport:
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}; choose from {', '.join(MODELS)}")
        c = self.cfg
        report = MetricReport(model, c.k)
        for run in range(c.runs):
            graph = self.graph(run)
            test = self._held_out(graph, "test")
            excl = self._exclusions(graph)
            if model in ("ekar", "ekar-star"):
                recs = read_jsonl(self.work / f"run_{run}" / RECS_FILES["path" if model == "ekar" else "reward"])
                lists = {graph.entity_id(r["user"]): [graph.entity_id(e["item"]) for e in r["items"]] for r in recs}
            elif model == "itemknn":
                knn = ItemKNN(graph.interactions, graph.items)
                lists = {u: knn.recommend(u, c.k, excl[u]) for u in test}
            else:
                sm = self.load_score_model(run)
                lists = {u: kge_rec_recommend(u, sm, graph.items, c.k, excl[u]) for u in test}
            report.runs.append(evaluate_lists(lists, test, c.k))
        return report

    def patterns(self, run: int, strategy: str = "path") -> list[tuple[str, float]]:
        graph = self.graph(run)
        walks = []
        for r in read_jsonl(self.work / f"run_{run}" / RECS_FILES[strategy]):
            u = graph.entity_id(r["user"])
            for e in r["items"]:
                rels = [START] + [graph.relation_id(s["relation"]) for s in e["raw_path"]]
                ents = [u] + [graph.entity_id(s["entity"]) for s in e["raw_path"]]
                walks.append((rels, ents))
        return path_pattern_stats(walks, graph)

    def run_all(self) -> list[str]:
        self.ingest()
        for run in range(self.cfg.runs):
            self.train_kge(run)
            self.train_policy(run)
            self.recommend(run)
        self.evaluate()
        return self.executed


def run_pipeline(cfg: RunConfig) -> list[str]:
    """Run every stage that is out of date; returns the stages that executed."""
    return Pipeline(cfg).run_all()

