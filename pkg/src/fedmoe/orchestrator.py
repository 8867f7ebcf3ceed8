"""End-to-end one-shot federated simulation.

Every stage reads its inputs from, and writes its outputs to, one run
directory, so the CLI can run stages individually or all at once with the same
results. Stage seeds are derived from the master seed and the stage name,
which lets ablation arms share their early stages bit-exactly.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .clustering import build_proxy, kmeans_domains, similarity_matrix
from .datagen import EMBED_DIM, Corpora, compute_embedding, gen_corpora, load_corpora, save_corpora
from .distill import DistillConfig, distill
from .fusion import dominant_expert_by_domain, merge, routing_stats, trainable_fraction, tune_global
from .models import DenseLm, MoeConfig, family_config, log_perplexity, token_accuracy, train_local
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

PAYLOAD_KINDS = ("model", "embedding", "config")
METRICS_HEADER = ["stage", "model", "domain", "log_ppl", "token_acc"]
STAGES = ("gen-data", "train-devices", "cluster", "distill", "merge", "tune", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class PipelineConfig:
    seed: int = 0
    n_domains: int = 3
    devices_per_domain: int = 4
    tokens_per_device: int = 4000
    vocab_size: int = 64
    seq_len: int = 32
    separation: float = 0.9
    public_docs: int = 800
    test_docs: int = 48
    mix: float = 0.0
    dirichlet_alpha: float = 5.0
    arch_families: list = field(default_factory=lambda: ["tinyA", "tinyB", "tinyC"])
    device_epochs: int = 15
    device_lr: float = 3e-3
    batch_size: int = 16
    n_experts: int = 3
    top_k: int = 2
    student_family: str = "base"
    seed_base_docs: int = 200
    seed_base_epochs: int = 1
    seed_base_lr: float = 1e-3
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 2.0
    distill_epochs: int = 4
    distill_lr: float = 3e-3
    n_stages: int = 2
    n_queries: int = 8
    vaa_dim: int = 32
    vaa_heads: int = 2
    literal_scale: bool = False
    weighted_proxy: bool = False
    tune_epochs: int = 2
    tune_lr: float = 1e-3
    baseline_rounds: int = 10

    @property
    def n_devices(self) -> int:
        return self.n_domains * self.devices_per_domain

    def distill_config(self, index: int) -> DistillConfig:
        return DistillConfig(alpha=self.alpha, beta=self.beta, tau=self.tau, epochs=self.distill_epochs,
                             lr=self.distill_lr, seed=derive_seed(self.seed, "distill", index),
                             batch_size=self.batch_size, n_stages=self.n_stages, n_queries=self.n_queries,
                             vaa_dim=self.vaa_dim, vaa_heads=self.vaa_heads, literal_scale=self.literal_scale)

    def moe_config(self) -> MoeConfig:
        return MoeConfig(self.backbone(), self.n_experts, self.top_k)

    def backbone(self):
        return family_config(self.student_family, self.vocab_size, self.seq_len)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if "config" in d and isinstance(d["config"], dict):
            d = d["config"]
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def smoke_config(seed: int = 0) -> PipelineConfig:
    """N=4, K=2 configuration that finishes in well under a minute."""
    return PipelineConfig(seed=seed, n_domains=2, devices_per_domain=2, tokens_per_device=1200,
                          public_docs=96, test_docs=16, arch_families=["tinyA", "tinyB"], device_epochs=2,
                          n_experts=2, top_k=1, seed_base_docs=32, distill_epochs=1, tune_epochs=1)


# communication ledger ---------------------------------------------------------


class CommLedger:
    """Append-only record of simulated transfers."""

    def __init__(self):
        self._entries: list[dict] = []
        self._lock = threading.Lock()

    def append(self, sender: str, receiver: str, kind: str, n_bytes: int, round_index: int = 1,
               device: int | None = None) -> None:
        if kind not in PAYLOAD_KINDS:
            raise ValueError(f"payload kind must be one of {PAYLOAD_KINDS}, got {kind!r}")
        if n_bytes <= 0:
            raise ValueError("transfer size must be positive")
        entry = {"sender": sender, "receiver": receiver, "kind": kind, "bytes": int(n_bytes),
                 "round": int(round_index), "device": device}
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> list[dict]:
        key = lambda e: (e["round"], -1 if e["device"] is None else e["device"], PAYLOAD_KINDS.index(e["kind"]))
        return sorted(self._entries, key=key)

    def to_json(self) -> str:
        return json.dumps(self.entries, indent=1, sort_keys=True)

    @classmethod
    def from_entries(cls, entries: list[dict]) -> "CommLedger":
        led = cls()
        for e in entries:
            led.append(e["sender"], e["receiver"], e["kind"], e["bytes"], e["round"], e.get("device"))
        return led

    @classmethod
    def load(cls, path) -> "CommLedger":
        return cls.from_entries(json.loads(Path(path).read_text()))


def comm_cost(ledger: CommLedger) -> dict:
    """Total uploaded model bytes, with embedding and config bytes reported separately."""
    out = {"model_bytes": 0, "embedding_bytes": 0, "config_bytes": 0}
    for e in ledger.entries:
        out[f"{e['kind']}_bytes"] += e["bytes"]
    return out


def baseline_comm_cost(n_devices: int, local_model_bytes: int, rounds: int) -> int:
    """Multi-round baseline: every round each device downloads and uploads its local model."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return rounds * n_devices * 2 * local_model_bytes


def pruned_moe_bytes(cfg: PipelineConfig) -> int:
    """Checkpoint size of the MoE backbone with exactly one expert FFN per layer."""
    return len(checkpoint.save_bytes(DenseLm.zeros(cfg.backbone())))


# helpers ----------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _fmt(x: float) -> str:
    return f"{x:.10f}"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


def _pmap(fn: Callable, items: list, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def arch_assignment(cfg: PipelineConfig) -> list[str]:
    fams = cfg.arch_families
    cyc = [fams[i % len(fams)] for i in range(cfg.n_devices)]
    return [str(f) for f in rng_for(cfg.seed, "arch-assignment").permutation(cyc)]


def family_init(cfg: PipelineConfig, family: str) -> DenseLm:
    """Common starting checkpoint shared by every device of one family."""
    idx = sorted(cfg.arch_families).index(family)
    return DenseLm.init(family_config(family, cfg.vocab_size, cfg.seq_len), derive_seed(cfg.seed, "family-init", idx))


# stages -------------------------------------------------------------------------


def stage_gen_data(cfg: PipelineConfig, out: Path, threads: int = 1) -> None:
    corpora = gen_corpora(cfg.n_domains, cfg.devices_per_domain, cfg.tokens_per_device, cfg.seed,
                          vocab_size=cfg.vocab_size, seq_len=cfg.seq_len, separation=cfg.separation,
                          public_docs=cfg.public_docs, test_docs=cfg.test_docs, mix=cfg.mix,
                          dirichlet_alpha=cfg.dirichlet_alpha)
    save_corpora(corpora, out, arch_assignment(cfg))


def stage_train_devices(cfg: PipelineConfig, out: Path, threads: int = 1) -> None:
    """Local training on every device, then the single upload round."""
    corpora, manifest = load_corpora(out)
    devices = manifest["devices"]
    (out / "devices").mkdir(exist_ok=True)
    (out / "uploads").mkdir(exist_ok=True)

    def run(n: int):
        fam = devices[n]["arch_family"]
        model, losses = train_local(family_init(cfg, fam), corpora.device_shards[n], cfg.device_epochs,
                                    cfg.device_lr, derive_seed(cfg.seed, "device-train", n), cfg.batch_size)
        _write_csv(out / f"devices/device_{n:03d}_loss.csv", ["epoch", "loss"],
                   [[i + 1, _fmt(v)] for i, v in enumerate(losses)])
        return model

    models = _pmap(run, list(range(len(devices))), threads)
    ledger = CommLedger()
    for n, model in enumerate(models):
        size = checkpoint.save(model, out / f"uploads/device_{n:03d}.ckpt")
        ledger.append(f"device_{n:03d}", "server", "model", size, 1, n)
        emb = np.asarray(devices[n]["embedding"], dtype="<f8")
        (out / f"uploads/device_{n:03d}.emb").write_bytes(emb.tobytes())
        ledger.append(f"device_{n:03d}", "server", "embedding", emb.nbytes, 1, n)
    (out / "ledger.json").write_text(ledger.to_json())


def _load_uploads(out: Path, n: int) -> tuple[list[DenseLm], np.ndarray]:
    models = [checkpoint.load(out / f"uploads/device_{i:03d}.ckpt") for i in range(n)]
    emb = np.stack([np.frombuffer((out / f"uploads/device_{i:03d}.emb").read_bytes(), dtype="<f8")
                    for i in range(n)])
    return models, emb


def stage_cluster(cfg: PipelineConfig, out: Path, threads: int = 1) -> None:
    """Server side: only uploaded models and embeddings are read here."""
    _, manifest = load_corpora(out)
    n = len(manifest["devices"])
    models, emb = _load_uploads(out, n)
    if emb.shape[1] != EMBED_DIM:
        raise ValueError("uploaded embeddings have the wrong dimension")
    sim = similarity_matrix(emb)
    groups = kmeans_domains(emb, cfg.n_experts, derive_seed(cfg.seed, "kmeans"))
    tokens = [d["n_windows"] * (cfg.seq_len + 1) for d in manifest["devices"]]
    (out / "proxies").mkdir(exist_ok=True)
    reports = []
    for i, members in enumerate(groups):
        cluster = build_proxy(i, members, models, tokens, weighted=cfg.weighted_proxy)
        checkpoint.save(cluster.proxy, out / f"proxies/proxy_{i}.ckpt")
        reports.append(cluster.report(sim))
    _write_json(out / "clusters.json", {"clusters": reports, "similarity": np.round(sim, 12).tolist()})


def stage_distill(cfg: PipelineConfig, out: Path, threads: int = 1) -> None:
    corpora, _ = load_corpora(out)
    seed_base = DenseLm.init(cfg.backbone(), derive_seed(cfg.seed, "seed-base-init"))
    seed_base, _ = train_local(seed_base, corpora.public[:cfg.seed_base_docs], cfg.seed_base_epochs,
                               cfg.seed_base_lr, derive_seed(cfg.seed, "seed-base-train"), cfg.batch_size)
    (out / "students").mkdir(exist_ok=True)
    checkpoint.save(seed_base, out / "students/seed_base.ckpt")
    seed_base = checkpoint.load(out / "students/seed_base.ckpt")

    def run(i: int):
        teacher = checkpoint.load(out / f"proxies/proxy_{i}.ckpt")
        dcfg = cfg.distill_config(i)
        student, res = distill(teacher, seed_base, corpora.public, dcfg, label=f"distill[{i}]")
        checkpoint.save(student, out / f"students/student_{i}.ckpt")
        _write_csv(out / f"students/student_{i}_loss.csv", ["epoch", "L_CE", "L_FM", "L_KL", "L_KD"],
                   [[c["epoch"], _fmt(c["ce"]), _fmt(c["fm"]), _fmt(c["kl"]), _fmt(c["kd"])] for c in res.curves])
        return {"student": i, "config": dcfg.to_dict(), "stage_plan": res.plan.to_dict(),
                "teacher_family": teacher.config.arch_family}

    records = _pmap(run, list(range(cfg.n_experts)), threads)
    _write_json(out / "distill.json", {"distillations": records})


def stage_merge(cfg: PipelineConfig, out: Path, threads: int = 1) -> None:
    bases = [checkpoint.load(out / f"students/student_{i}.ckpt") for i in range(cfg.n_experts)]
    moe, report = merge(bases, cfg.moe_config(), derive_seed(cfg.seed, "gate-init"))
    (out / "moe").mkdir(exist_ok=True)
    checkpoint.save(moe, out / "moe/merged.ckpt")
    _write_json(out / "merge_report.json", report.to_dict())


def stage_tune(cfg: PipelineConfig, out: Path, threads: int = 1) -> None:
    corpora, _ = load_corpora(out)
    moe = checkpoint.load(out / "moe/merged.ckpt")
    tuned, losses = tune_global(moe, corpora.public, cfg.tune_epochs, cfg.tune_lr,
                                derive_seed(cfg.seed, "tune"), cfg.batch_size)
    checkpoint.save(tuned, out / "moe/tuned.ckpt")
    _write_csv(out / "moe/tune_loss.csv", ["epoch", "loss"], [[i + 1, _fmt(v)] for i, v in enumerate(losses)])


def evaluate(models: list[tuple[str, str, object]], tests: dict[str, np.ndarray]) -> list[list[str]]:
    """Rows of (stage, model, domain, log_ppl, token_acc) for every model on every test corpus."""
    rows = []
    for stage, name, model in models:
        for dom, corpus in tests.items():
            rows.append([stage, name, dom, _fmt(log_perplexity(model, corpus)), _fmt(token_accuracy(model, corpus))])
    return rows


def test_sets(corpora: Corpora) -> dict[str, np.ndarray]:
    tests = {f"domain_{d}": corpora.test[d] for d in sorted(corpora.test)}
    tests["mixed"] = corpora.mixed_test()
    return tests


def stage_evaluate(cfg: PipelineConfig, out: Path, threads: int = 1) -> None:
    corpora, _ = load_corpora(out)
    models = [("proxy", f"proxy_{i}", checkpoint.load(out / f"proxies/proxy_{i}.ckpt")) for i in range(cfg.n_experts)]
    models.append(("seed_base", "seed_base", checkpoint.load(out / "students/seed_base.ckpt")))
    models += [("student", f"student_{i}", checkpoint.load(out / f"students/student_{i}.ckpt"))
               for i in range(cfg.n_experts)]
    merged = checkpoint.load(out / "moe/merged.ckpt")
    tuned = checkpoint.load(out / "moe/tuned.ckpt")
    models += [("moe_merged", "moe_merged", merged), ("moe", "moe", tuned)]
    rows = evaluate(models, test_sets(corpora))
    _write_csv(out / "metrics.csv", METRICS_HEADER, rows)
    _write_json(out / "metrics.json", [dict(zip(METRICS_HEADER, r)) for r in rows])

    mixed = corpora.mixed_test()
    labels = np.concatenate([[d] * len(corpora.test[d]) for d in sorted(corpora.test)])
    stats = routing_stats(tuned, mixed, labels)
    clusters = _read_json(out / "clusters.json")["clusters"]
    _, manifest = load_corpora(out)
    dev_domain = [d["domain"] for d in manifest["devices"]]
    cluster_domain = {}
    for c in clusters:
        doms = [dev_domain[m] for m in c["members"]]
        cluster_domain[str(max(set(doms), key=lambda d: (doms.count(d), -d)))] = c["cluster"]
    dominant = dominant_expert_by_domain(stats)
    matches = sum(1 for d, e in dominant.items() if cluster_domain.get(d) == e)
    _write_json(out / "routing.json", {**stats.to_dict(), "dominant_expert": dominant,
                                       "expected_expert": cluster_domain,
                                       "domains_matching_proxy_expert": matches,
                                       "trainable_fraction": trainable_fraction(tuned)})


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train-devices": stage_train_devices,
    "cluster": stage_cluster,
    "distill": stage_distill,
    "merge": stage_merge,
    "tune": stage_tune,
    "evaluate": stage_evaluate,
}


def read_metrics(out) -> dict[tuple[str, str], dict]:
    data = _read_json(Path(out) / "metrics.json")
    return {(r["model"], r["domain"]): {"log_ppl": float(r["log_ppl"]), "token_acc": float(r["token_acc"])}
            for r in data}


def build_manifest(cfg: PipelineConfig, out: Path) -> dict:
    """Everything needed to reproduce the run, plus its headline outputs."""
    ledger = CommLedger.load(out / "ledger.json")
    cost = comm_cost(ledger)
    b_loc = pruned_moe_bytes(cfg)
    baseline = baseline_comm_cost(cfg.n_devices, b_loc, cfg.baseline_rounds)
    seeds = {"master": cfg.seed, "kmeans": derive_seed(cfg.seed, "kmeans"),
             "seed_base_init": derive_seed(cfg.seed, "seed-base-init"),
             "seed_base_train": derive_seed(cfg.seed, "seed-base-train"),
             "gate_init": derive_seed(cfg.seed, "gate-init"), "tune": derive_seed(cfg.seed, "tune"),
             "device_train": [derive_seed(cfg.seed, "device-train", n) for n in range(cfg.n_devices)],
             "distill": [derive_seed(cfg.seed, "distill", i) for i in range(cfg.n_experts)]}
    metrics = read_metrics(out)
    summary = {f"{m}/{d}": v for (m, d), v in sorted(metrics.items())}
    manifest = {
        "config": cfg.to_dict(),
        "seeds": seeds,
        "N": cfg.n_devices, "K": cfg.n_experts, "k": cfg.top_k,
        "arch_assignment": [d["arch_family"] for d in _read_json(out / "data_manifest.json")["devices"]],
        "epochs": {"device": cfg.device_epochs, "distill": cfg.distill_epochs, "tune": cfg.tune_epochs},
        "distill": _read_json(out / "distill.json")["distillations"],
        "clusters": _read_json(out / "clusters.json")["clusters"],
        "comm": {**cost, "one_shot_net": cost["model_bytes"], "baseline_rounds": cfg.baseline_rounds,
                 "baseline_local_model_bytes": b_loc, "baseline_net": baseline,
                 "reduction": 1.0 - cost["model_bytes"] / baseline},
        "metrics": summary,
    }
    return manifest


def run_stage(stage: str, cfg: PipelineConfig, out, threads: int = 1) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    t0 = time.perf_counter()
    try:
        STAGE_FUNCS[stage](cfg, out, threads)
    except Exception as exc:
        _write_json(out / "failure.json", {"stage": stage, "error": f"{type(exc).__name__}: {exc}"})
        raise StageError(stage, exc) from exc
    timings_path = out / "timings.json"
    timings = _read_json(timings_path) if timings_path.exists() else {}
    timings[stage] = time.perf_counter() - t0
    _write_json(timings_path, timings)
    log.info("stage %s done in %.1fs", stage, timings[stage])


def run_pipeline(cfg: PipelineConfig, out, threads: int = 1) -> dict:
    out = Path(out)
    for stage in STAGES:
        run_stage(stage, cfg, out, threads)
    manifest = build_manifest(cfg, out)
    _write_json(out / "manifest.json", manifest)
    return manifest


# ablation -----------------------------------------------------------------------


def ablate(cfg: PipelineConfig, out, threads: int = 1) -> dict:
    """Run the VAA arm and the logits-only arm (alpha = 0) from one master seed and pair the metrics."""
    out = Path(out)
    arms = {"vaa": cfg, "logits_only": PipelineConfig.from_dict({**cfg.to_dict(), "alpha": 0.0})}
    for name, arm_cfg in arms.items():
        run_pipeline(arm_cfg, out / name, threads)
    a, b = out / "vaa", out / "logits_only"
    n = cfg.n_devices
    shared = {
        "device_models_identical": all(
            (a / f"uploads/device_{i:03d}.ckpt").read_bytes() == (b / f"uploads/device_{i:03d}.ckpt").read_bytes()
            for i in range(n)),
        "clusters_identical": (a / "clusters.json").read_bytes() == (b / "clusters.json").read_bytes(),
        "proxies_identical": all(
            (a / f"proxies/proxy_{i}.ckpt").read_bytes() == (b / f"proxies/proxy_{i}.ckpt").read_bytes()
            for i in range(cfg.n_experts)),
        "ledgers_identical": (a / "ledger.json").read_bytes() == (b / "ledger.json").read_bytes(),
    }
    ma, mb = read_metrics(a), read_metrics(b)
    rows = []
    for key in sorted(ma):
        rows.append([key[0], key[1], _fmt(ma[key]["log_ppl"]), _fmt(mb[key]["log_ppl"]),
                     _fmt(ma[key]["token_acc"]), _fmt(mb[key]["token_acc"])])
    _write_csv(out / "ablation.csv", ["model", "domain", "log_ppl_vaa", "log_ppl_logits_only",
                                      "token_acc_vaa", "token_acc_logits_only"], rows)
    vaa_mixed = ma[("moe", "mixed")]["log_ppl"]
    lo_mixed = mb[("moe", "mixed")]["log_ppl"]
    result = {**shared, "moe_mixed_log_ppl": {"vaa": vaa_mixed, "logits_only": lo_mixed},
              "vaa_not_worse": vaa_mixed <= lo_mixed}
    _write_json(out / "ablation.json", result)
    return result


# report -------------------------------------------------------------------------


def report(out) -> str:
    out = Path(out)
    manifest = _read_json(out / "manifest.json")
    comm = manifest["comm"]
    lines = [f"run: {out}",
             f"devices N={manifest['N']}  experts K={manifest['K']}  active k={manifest['k']}",
             f"one-shot upload: {comm['one_shot_net']} bytes (+{comm['embedding_bytes']} embedding bytes)",
             f"baseline ({comm['baseline_rounds']} rounds x {comm['baseline_local_model_bytes']} B): "
             f"{comm['baseline_net']} bytes  -> reduction {100 * comm['reduction']:.1f}%"]
    for c in manifest["clusters"]:
        lines.append(f"cluster {c['cluster']}: members={c['members']} family={c['dominant_family']} "
                     f"excluded={c['excluded']} intra_cos={c['intra_mean_cosine']:.3f}")
    lines.append(f"{'model':<12} {'domain':<10} {'log_ppl':>9} {'acc%':>7}")
    for key, v in manifest["metrics"].items():
        model, dom = key.split("/")
        lines.append(f"{model:<12} {dom:<10} {v['log_ppl']:9.4f} {v['token_acc']:7.2f}")
    abl = out / "ablation.json"
    if abl.exists():
        a = _read_json(abl)
        lines.append(f"ablation: vaa={a['moe_mixed_log_ppl']['vaa']:.4f} "
                     f"logits_only={a['moe_mixed_log_ppl']['logits_only']:.4f}")
    return "\n".join(lines)
