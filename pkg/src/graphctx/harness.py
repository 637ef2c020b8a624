"""Config-driven experiment runs: context -> prompt -> backend -> parse -> score, persisted as JSONL."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .gateway import (
    BackendUnavailable,
    BudgetExceeded,
    Gateway,
    ModelBackend,
    ResponseCache,
)
from .graph import Split, TextAttributedGraph, load_graph, make_split
from .prompting import (
    MissingLabelsError,
    PromptRecord,
    Strategy,
    assemble_bundle_labels,
    build_prompt,
    parse_answer,
)
from .retrieval import (
    ContextBundle,
    EmbeddingIndex,
    build_index,
    retrieve,
    sample_demonstrations,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_DEMOS = 3
SWEEP_AXES = ("k", "retriever", "backend")


class RunAborted(RuntimeError):
    def __init__(self, message: str, partial: Optional[Path] = None):
        super().__init__(message)
        self.partial = partial


@dataclass
class RunConfig:
    dataset: Path
    strategy: Strategy
    backend: ModelBackend
    split: Any = field(default_factory=lambda: {"scheme": "per-class-20"})  # Path or scheme dict
    seeds: tuple[int, ...] = (0, 1, 2)
    parallelism: int = 4
    cache: Optional[Path] = None
    output_dir: Path = Path("out")
    fallback_zero_shot: bool = False
    token_budget: Optional[int] = None
    max_requests: int = 10_000
    embedding_dim: int = 1024
    external_embeddings: Optional[Path] = None
    pseudo_responses: Optional[Path] = None
    graph_order: str = "id"
    max_test_nodes: Optional[int] = None
    backends: dict[str, dict] = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: str | Path = ".") -> "RunConfig":
        base = Path(base_dir)

        def path(p: Any) -> Optional[Path]:
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() else base / p

        d = copy.deepcopy(dict(d))
        ret = d.get("retriever", {})
        if isinstance(ret, str):
            ret = {"kind": ret}
        strategy = Strategy(
            kind=d["strategy"],
            k=ret.get("k"),
            retriever=ret.get("kind", "graph"),
            label_visibility=d.get("label_visibility", "train-only"),
            hops=ret.get("hops", 1),
            match_degree=ret.get("match_degree", False),
        )
        backends = d.get("backends", {})
        backend = resolve_backend(d.get("backend", "mock-majority"), backends)

        split = d.get("split", {"scheme": "per-class-20"})
        if isinstance(split, str):
            split = path(split)
            if not split.is_file():
                raise FileNotFoundError(f"split file not found: {split}")
        seeds = tuple(int(s) for s in d.get("seeds", (0, 1, 2)))
        if not seeds:
            raise ValueError("seeds must be non-empty")
        dataset = path(d["dataset"])
        if not dataset.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {dataset}")
        cfg = cls(
            dataset=dataset,
            strategy=strategy,
            backend=backend,
            split=split,
            seeds=seeds,
            parallelism=int(d.get("parallelism", 4)),
            cache=path(d.get("cache")),
            output_dir=path(d.get("output_dir", "out")),
            fallback_zero_shot=bool(d.get("fallback_zero_shot", False)),
            token_budget=d.get("token_budget"),
            max_requests=int(d.get("max_requests", 10_000)),
            embedding_dim=int(d.get("embedding_dim", 1024)),
            external_embeddings=path(d.get("external_embeddings")),
            pseudo_responses=path(d.get("pseudo_responses")),
            graph_order=ret.get("order", "id"),
            max_test_nodes=d.get("max_test_nodes"),
            backends=backends,
            raw=d,
        )
        for p in (cfg.external_embeddings, cfg.pseudo_responses):
            if p is not None and not p.is_file():
                raise FileNotFoundError(f"referenced file not found: {p}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        return cls.from_dict(json.loads(p.read_text(encoding="utf-8")), p.parent)

    def resolved(self) -> dict:
        """JSON-safe description of everything that determines results."""
        return {
            "dataset": str(self.dataset),
            "strategy": self.strategy.as_dict(),
            "backend": _backend_dict(self.backend),
            "split": str(self.split) if isinstance(self.split, Path) else self.split,
            "seeds": list(self.seeds),
            "fallback_zero_shot": self.fallback_zero_shot,
            "token_budget": self.token_budget,
            "embedding_dim": self.embedding_dim,
            "external_embeddings": None if self.external_embeddings is None else str(self.external_embeddings),
            "pseudo_responses": None if self.pseudo_responses is None else str(self.pseudo_responses),
            "graph_order": self.graph_order,
            "max_test_nodes": self.max_test_nodes,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()[:16]


def _backend_dict(b: ModelBackend) -> dict:
    return {
        "kind": b.kind,
        "name": b.name,
        "model": b.model,
        "endpoint_url": b.endpoint_url,
        "temperature": b.temperature,
        "max_tokens": b.max_tokens,
        "fixed_reply": b.fixed_reply,
    }


def resolve_backend(ref: Any, backends: Mapping[str, dict]) -> ModelBackend:
    """A backend reference is a name from ``backends``, a bare mock kind, or an inline dict."""
    if isinstance(ref, dict):
        return ModelBackend.from_dict(ref)
    if ref in backends:
        return ModelBackend.from_dict(backends[ref], name=ref)
    return ModelBackend(kind=ref)


def strategy_label(s: Strategy) -> str:
    parts = [s.kind]
    if s.kind in ("query-rag", "label-rag", "fewshot-rag") and s.retriever != "graph":
        parts.append(s.retriever)
    if s.match_degree:
        parts.append("kdeg")
    elif s.k is not None and s.kind not in ("zero-shot", "one-shot"):
        parts.append(f"k{s.k}")
    if s.hops != 1:
        parts.append(f"h{s.hops}")
    if s.kind in ("label-rag", "fewshot-rag"):
        parts.append(s.label_visibility)
    return "-".join(parts)


# ---------------------------------------------------------------- context + prompts


def build_context(
    g: TextAttributedGraph,
    v: int,
    strategy: Strategy,
    *,
    split: Optional[Split] = None,
    index: Optional[EmbeddingIndex] = None,
    seed: int = 0,
    responses: Optional[Mapping[int, str]] = None,
    order: str = "id",
) -> ContextBundle:
    """Source the context a strategy shows for node ``v`` and apply the label policy."""
    kind = strategy.kind
    if kind == "zero-shot":
        return ContextBundle(v, (), "graph", 0)
    if kind in ("one-shot", "few-shot"):
        if split is None:
            raise ValueError("few-shot demonstrations are drawn from a training split")
        k = int(g.degrees[v]) if strategy.match_degree else (strategy.k if strategy.k is not None else DEFAULT_DEMOS)
        return sample_demonstrations(g, split.train, v, k, seed)
    if kind == "rag":
        k = strategy.k if (strategy.k is not None or strategy.match_degree) else DEFAULT_DEMOS
        bundle = retrieve(g, v, "text", k, match_degree=strategy.match_degree, index=index, seed=seed)
    else:
        match_degree = strategy.match_degree or (strategy.retriever != "graph" and strategy.k is None)
        bundle = retrieve(
            g,
            v,
            strategy.retriever,
            strategy.k,
            hops=strategy.hops,
            match_degree=match_degree,
            index=index,
            seed=seed,
            order=order,
        )
    if strategy.shows_labels:
        bundle = assemble_bundle_labels(bundle, g, split, strategy.label_visibility, responses)
    return bundle


def prepare_record(
    g: TextAttributedGraph,
    v: int,
    strategy: Strategy,
    *,
    split: Optional[Split] = None,
    index: Optional[EmbeddingIndex] = None,
    seed: int = 0,
    responses: Optional[Mapping[int, str]] = None,
    token_budget: Optional[int] = None,
    fallback_zero_shot: bool = False,
    order: str = "id",
) -> PromptRecord:
    bundle = build_context(
        g, v, strategy, split=split, index=index, seed=seed, responses=responses, order=order
    )
    return build_prompt(
        g, v, strategy, bundle, token_budget=token_budget, fallback_zero_shot=fallback_zero_shot
    )


def needs_index(strategy: Strategy) -> bool:
    return strategy.kind == "rag" or (
        strategy.kind in ("query-rag", "label-rag", "fewshot-rag") and strategy.retriever == "text"
    )


def load_responses(path: str | Path) -> dict[int, str]:
    """Node -> response map from an earlier result file, for the ``pseudo`` label policy."""
    result = RunResult.read(path)
    cats = result.header.get("categories", [])
    out: dict[int, str] = {}
    for rec in result.records:
        if rec.get("pred") is not None and cats:
            out[int(rec["node"])] = cats[rec["pred"]]
        elif rec.get("reply"):
            out[int(rec["node"])] = rec["reply"].strip()
    return out


# ---------------------------------------------------------------- results

_HASHED_FIELDS = ("node", "pred", "gold", "method", "reply", "truncated", "context", "error")


@dataclass
class RunResult:
    header: dict
    records: list[dict]
    path: Optional[Path] = None

    @property
    def accuracy(self) -> float:
        if not self.records:
            return float("nan")
        return sum(r["pred"] is not None and r["pred"] == r["gold"] for r in self.records) / len(self.records)

    @property
    def parse_failure_rate(self) -> float:
        if not self.records:
            return float("nan")
        return sum(r["pred"] is None for r in self.records) / len(self.records)

    @property
    def predictions(self) -> dict[int, Optional[int]]:
        return {r["node"]: r["pred"] for r in self.records}

    def content_hash(self) -> str:
        """Digest of the resolved config and per-node outcomes; timings and timestamps excluded."""
        h = hashlib.sha256()
        h.update(json.dumps(self.header.get("config"), sort_keys=True).encode())
        h.update(str(self.header.get("seed")).encode())
        for r in self.records:
            h.update(json.dumps({k: r.get(k) for k in _HASHED_FIELDS}, sort_keys=True).encode())
        return h.hexdigest()[:16]

    def write(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        header = {"schema": SCHEMA_VERSION, **self.header}
        header["accuracy"] = self.accuracy
        header["evaluated"] = len(self.records)
        header["parse_failure_rate"] = self.parse_failure_rate
        header["content_hash"] = self.content_hash()
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, ensure_ascii=False) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        self.path = p
        return p

    @classmethod
    def read(cls, path: str | Path) -> "RunResult":
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines:
            raise ValueError(f"{path}: empty result file")
        header = lines[0]
        if header.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"{path}: schema {header.get('schema')!r}, expected {SCHEMA_VERSION}")
        return cls(header, lines[1:], Path(path))


def summarize(results: Sequence[RunResult]) -> dict:
    accs = np.array([r.accuracy for r in results], dtype=float)
    return {
        "runs": len(results),
        "mean": float(accs.mean()),
        "std": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
        "accuracies": accs.tolist(),
    }


# ---------------------------------------------------------------- runs


class _Writer:
    """Serializes record appends to the partial file."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("", encoding="utf-8")

    def append(self, rec: dict) -> None:
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass
class RunInputs:
    graph: TextAttributedGraph
    index: Optional[EmbeddingIndex]
    responses: Optional[dict[int, str]]


def load_inputs(config: RunConfig) -> RunInputs:
    g = load_graph(config.dataset)
    index = None
    if needs_index(config.strategy) or config.graph_order == "similarity":
        index = build_index(g, config.embedding_dim, config.external_embeddings)
    responses = load_responses(config.pseudo_responses) if config.pseudo_responses else None
    if config.strategy.label_visibility == "pseudo" and responses is None and config.strategy.shows_labels:
        raise ValueError("pseudo label policy needs pseudo_responses")
    return RunInputs(g, index, responses)


def split_for_seed(config: RunConfig, g: TextAttributedGraph, seed: int) -> Split:
    if isinstance(config.split, Path):
        return Split.load(config.split)
    spec = dict(config.split)
    scheme = spec.pop("scheme", "per-class-20")
    return make_split(g, scheme, seed, **spec)


def result_stem(config: RunConfig, g: TextAttributedGraph, seed: int) -> str:
    name = g.name or config.dataset.name
    return f"{name}__{strategy_label(config.strategy)}__{config.backend.name}__seed{seed}"


def run_seed(
    config: RunConfig,
    seed: int,
    gateway: Gateway,
    inputs: RunInputs,
    *,
    write: bool = True,
) -> RunResult:
    g = inputs.graph
    split = split_for_seed(config, g, seed)
    test = sorted(split.test)
    if config.max_test_nodes is not None:
        test = test[: config.max_test_nodes]
    if not test:
        raise ValueError(f"split {split.scheme!r} (seed {seed}) has no test nodes")
    stem = result_stem(config, g, seed)
    writer = _Writer(config.output_dir / f"{stem}.partial.jsonl") if write else None
    started = time.time()

    def work(v: int) -> dict:
        rec: dict[str, Any] = {"node": v, "gold": g.label_of(v), "pred": None, "method": None}
        try:
            prompt = prepare_record(
                g,
                v,
                config.strategy,
                split=split,
                index=inputs.index,
                seed=seed,
                responses=inputs.responses,
                token_budget=config.token_budget,
                fallback_zero_shot=config.fallback_zero_shot,
                order=config.graph_order,
            )
        except MissingLabelsError as exc:
            rec.update(reply=None, error=f"no-context: {exc}", truncated=0, context=[], latency=0.0, from_cache=False)
        else:
            gen = gateway.complete(prompt)
            rec.update(
                context=prompt.context.ids,
                truncated=prompt.truncated,
                reply=gen.raw_text,
                latency=round(gen.latency, 6),
                from_cache=gen.from_cache,
                error=gen.error,
            )
            if gen.ok:
                parsed = parse_answer(gen.raw_text, g.categories)
                rec["pred"], rec["method"] = parsed.label, parsed.method
        if writer is not None:
            writer.append(rec)
        return rec

    with ThreadPoolExecutor(max_workers=max(1, config.parallelism)) as pool:
        futures = [pool.submit(work, v) for v in test]
        try:
            records = [f.result() for f in futures]
        except (BackendUnavailable, BudgetExceeded) as exc:
            for f in futures:
                f.cancel()
            raise RunAborted(f"run aborted: {exc}", writer.path if writer else None) from exc

    records.sort(key=lambda r: r["node"])
    header = {
        "config": config.resolved(),
        "config_hash": config.config_hash(),
        "dataset": g.name or config.dataset.name,
        "dataset_hash": g.content_hash(),
        "categories": list(g.categories),
        "strategy": strategy_label(config.strategy),
        "label_visibility": config.strategy.label_visibility,
        "backend": config.backend.name,
        "seed": seed,
        "split": {"scheme": split.scheme, "seed": split.seed, "train": len(split.train), "test": len(test)},
        "started": started,
        "finished": time.time(),
    }
    result = RunResult(header, records)
    if write:
        result.write(config.output_dir / f"{stem}.jsonl")
        writer.path.unlink(missing_ok=True)  # type: ignore[union-attr]
    return result


def run(config: RunConfig, *, inputs: Optional[RunInputs] = None, write: bool = True, **gateway_kw) -> list[RunResult]:
    """One result per seed; the response cache makes an interrupted run resumable."""
    inputs = inputs or load_inputs(config)
    cache = gateway_kw.pop("cache", None)
    if config.cache is not None:
        cache = ResponseCache(config.cache)
    with Gateway(
        config.backend,
        cache,
        graph=inputs.graph,
        parallelism=config.parallelism,
        max_requests=config.max_requests,
        **gateway_kw,
    ) as gw:
        results = [run_seed(config, s, gw, inputs, write=write) for s in config.seeds]
    if len(results) > 1:
        s = summarize(results)
        log.info("%s: accuracy %.4f ± %.4f over %d seeds", strategy_label(config.strategy), s["mean"], s["std"], s["runs"])
    return results


def parse_axis(spec: str) -> tuple[str, list[Any]]:
    """``"k=0,1,3"`` -> ``("k", [0, 1, 3])``."""
    name, _, values = spec.partition("=")
    name = name.strip()
    if name not in SWEEP_AXES or not values:
        raise ValueError(f"axis must look like one of {SWEEP_AXES} followed by =v1,v2,...")
    vals: list[Any] = [v.strip() for v in values.split(",") if v.strip()]
    if name == "k":
        vals = [int(v) for v in vals]
    return name, vals


def sweep(config: RunConfig, axis: str, values: Iterable[Any], **kw) -> list[list[RunResult]]:
    """One :func:`run` per axis value; the response cache is shared across the sweep."""
    values = list(values)
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    out = []
    inputs = kw.pop("inputs", None)
    for val in values:
        if axis == "k":
            cfg = replace(config, strategy=replace(config.strategy, k=int(val), match_degree=False))
        elif axis == "retriever":
            cfg = replace(config, strategy=replace(config.strategy, retriever=val))
        else:
            cfg = replace(config, backend=resolve_backend(val, config.backends))
        if inputs is None or (needs_index(cfg.strategy) and inputs.index is None):
            inputs = load_inputs(cfg)
        out.append(run(cfg, inputs=inputs, **kw))
    return out


BASELINE_METHODS = ("lp", "majority", "probe", "probe-propagated")


def run_baseline(
    g: TextAttributedGraph,
    split: Split,
    method: str,
    *,
    alpha: float = 0.9,
    steps: int = 2,
    dim: int = 1024,
    index: Optional[EmbeddingIndex] = None,
    l2: float = 1e-4,
    epochs: int = 200,
    dataset_label: str = "",
) -> RunResult:
    """Score a native baseline on ``split.test`` in the same record format as LLM runs."""
    from . import baselines as bl

    if not split.test:
        raise ValueError(f"split {split.scheme!r} has no test nodes")
    seeds = {int(v): int(g.labels[v]) for v in split.train}
    params: dict[str, Any] = {"method": method}
    if method == "lp":
        dist = bl.label_propagation(g, seeds, alpha=alpha)
        preds = dist.predict()
        params.update(alpha=alpha, iterations=dist.iterations_run, residual=dist.residual)
    elif method == "majority":
        preds = [bl.majority_vote(g, seeds, v) for v in range(g.node_count)]
    elif method in ("probe", "probe-propagated"):
        index = index or build_index(g, dim)
        x = index.vectors
        if method == "probe-propagated":
            x = bl.propagate_features(x, g, steps)
            params["steps"] = steps
        probe = bl.train_probe(x, g.labels, split.train, len(g.categories), l2=l2, epochs=epochs)
        preds = bl.predict_probe(probe, x).tolist()
        params.update(l2=l2, epochs=epochs, final_loss=probe.losses[-1])
    else:
        raise ValueError(f"unknown baseline {method!r}; expected one of {BASELINE_METHODS}")

    records = []
    for v in sorted(split.test):
        p = preds[v]
        records.append(
            {"node": v, "gold": g.label_of(v), "pred": None if p is None else int(p), "method": method,
             "reply": None, "truncated": 0, "context": [], "error": None, "latency": 0.0, "from_cache": False}
        )
    label = f"baseline-{method}"
    header = {
        "config": {"baseline": params, "split": {"scheme": split.scheme, "seed": split.seed}},
        "dataset": dataset_label or g.name,
        "dataset_hash": g.content_hash(),
        "categories": list(g.categories),
        "strategy": label,
        "label_visibility": "train-only",
        "backend": "native",
        "seed": split.seed,
        "split": {"scheme": split.scheme, "seed": split.seed, "train": len(split.train), "test": len(split.test)},
    }
    return RunResult(header, records)
