"""Experiment orchestrator: simulate -> train-source -> adapt -> evaluate,
plus random hyperparameter search, all driven by one JSON config.

Every subcommand is deterministic for a given config + seed; rerunning
overwrites result files byte-identically (wall-clock info lives in a
sidecar and in the trailing column of stage logs). Exit codes: 0 success,
2 config validation, 3 I/O, 4 checkpoint, 5 numerical abort.
"""

from __future__ import annotations

import argparse
import datetime
import json
import math
import os
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import NumericalError
from .iqdata import (
    Domain,
    IQFileError,
    Manifest,
    NormScheme,
    build_dataset,
    load_manifest,
)
from .models import (
    CheckpointError,
    EncoderConfig,
    ModelConfig,
    build_models,
    load_checkpoint,
    save_checkpoint,
)
from .report import STAGES, comparison_report, write_confusion_csv, \
    write_report_csv, write_report_json
from .simulator import ChannelProfile, DeviceProfile, SimConfig, synth_dataset
from .training import (
    SearchSpace,
    TrainConfig,
    adapt_target,
    evaluate,
    hyper_search,
    train_source,
    write_stage_log,
)

SOURCE_CHECKPOINT = "source_checkpoint.crf"
TARGET_CHECKPOINT = "target_checkpoint.crf"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERICAL = 5


class ConfigError(Exception):
    """Invalid or missing experiment configuration field."""


@dataclass
class DataConfig:
    window_len: int = 1024
    hop: int = 512
    normalization: str = "unit_rms"
    split_ratios: tuple = (0.8, 0.1, 0.1)

    def scheme(self) -> NormScheme:
        try:
            return NormScheme(self.normalization)
        except ValueError:
            raise ConfigError(
                f"data.normalization must be one of "
                f"{[s.value for s in NormScheme]}, got {self.normalization!r}")


@dataclass
class ScenarioConfig:
    name: str
    source_channels: tuple
    target_channels: tuple


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "out"


@dataclass
class ExperimentConfig:
    seed: int
    sim: SimConfig
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    scenario: ScenarioConfig
    paths: PathsConfig
    base_dir: Path = field(default_factory=Path)

    @property
    def data_dir(self) -> Path:
        return self.base_dir / self.paths.data_dir

    @property
    def out_dir(self) -> Path:
        return self.base_dir / self.paths.out_dir


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing field '{where}.{key}'")
    return section[key]


def _check_known(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown field '{where}.{sorted(unknown)[0]}'")


def _complex_list(raw, where: str) -> np.ndarray:
    taps = []
    for i, item in enumerate(raw):
        if isinstance(item, (int, float)):
            taps.append(complex(item))
        elif isinstance(item, (list, tuple)) and len(item) == 2:
            taps.append(complex(item[0], item[1]))
        else:
            raise ConfigError(f"{where}[{i}] must be a number or [re, im] pair")
    return np.array(taps, dtype=np.complex128)


def _parse_sim(section: dict, seed: int) -> SimConfig:
    _check_known(section, {"num_devices", "channels",
                           "captures_per_device_per_channel",
                           "samples_per_capture", "sample_rate_hz",
                           "symbol_rate_hz", "device_profiles"}, "sim")
    channels = {}
    for i, ch in enumerate(_require(section, "channels", "sim")):
        _check_known(ch, {"id", "fir_taps", "snr_db", "cfo_hz"},
                     f"sim.channels[{i}]")
        snr = ch.get("snr_db", math.inf)
        if snr is None or snr == "inf":
            snr = math.inf
        channels[int(_require(ch, "id", f"sim.channels[{i}]"))] = ChannelProfile(
            fir_taps=_complex_list(_require(ch, "fir_taps", f"sim.channels[{i}]"),
                                   f"sim.channels[{i}].fir_taps"),
            snr_db=float(snr),
            channel_cfo_hz=float(ch.get("cfo_hz", 0.0)),
        )
    profiles = None
    if "device_profiles" in section:
        profiles = []
        for i, dp in enumerate(section["device_profiles"]):
            _check_known(dp, {"gain_imbalance", "phase_skew", "cfo_hz",
                              "dc_offset", "pa_cubic"},
                         f"sim.device_profiles[{i}]")
            dc = dp.get("dc_offset", [0.0, 0.0])
            profiles.append(DeviceProfile(
                gain_imbalance=float(dp.get("gain_imbalance", 0.0)),
                phase_skew=float(dp.get("phase_skew", 0.0)),
                cfo_hz=float(dp.get("cfo_hz", 0.0)),
                dc_offset=complex(dc[0], dc[1]),
                pa_cubic=float(dp.get("pa_cubic", 0.0)),
            ))
    try:
        return SimConfig(
            num_devices=int(_require(section, "num_devices", "sim")),
            channels=channels,
            captures_per_device_per_channel=int(
                _require(section, "captures_per_device_per_channel", "sim")),
            samples_per_capture=int(_require(section, "samples_per_capture", "sim")),
            sample_rate_hz=float(_require(section, "sample_rate_hz", "sim")),
            symbol_rate_hz=float(_require(section, "symbol_rate_hz", "sim")),
            seed=seed,
            device_profiles=profiles,
        )
    except ValueError as exc:
        raise ConfigError(f"sim: {exc}") from exc


def _parse_model(section: dict) -> ModelConfig:
    _check_known(section, {"conv_channels", "kernel_sizes", "strides",
                           "dropout_p", "leaky_slope", "pool_out_len",
                           "feature_dim", "classifier_hidden",
                           "discriminator_hidden"}, "model")
    try:
        encoder = EncoderConfig(
            conv_channels=tuple(section.get("conv_channels", (16, 32, 64, 64, 128))),
            kernel_sizes=tuple(section.get("kernel_sizes", (7, 5, 5, 3, 3))),
            strides=tuple(section.get("strides", (2, 2, 2, 2, 2))),
            dropout_p=float(section.get("dropout_p", 0.3)),
            leaky_slope=float(section.get("leaky_slope", 0.2)),
            pool_out_len=int(section.get("pool_out_len", 1)),
            feature_dim=int(section.get("feature_dim", 128)),
        )
        return ModelConfig(
            encoder=encoder,
            classifier_hidden=int(section.get("classifier_hidden", 64)),
            discriminator_hidden=tuple(section.get("discriminator_hidden",
                                                   (128, 64, 32))),
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def _parse_train(section: dict, seed: int) -> TrainConfig:
    allowed = {"lr_source", "lr_target", "lr_discriminator", "batch_size",
               "epochs_source", "epochs_adapt", "temperature", "lambda_adv",
               "lambda_distill", "grl_lambda", "early_stop_patience"}
    _check_known(section, allowed, "train")
    defaults = TrainConfig(seed=seed)
    kwargs = {"seed": seed}
    for name in allowed:
        if name in section:
            value = section[name]
            kwargs[name] = int(value) if name in (
                "batch_size", "epochs_source", "epochs_adapt",
                "early_stop_patience") else float(value)
    try:
        return TrainConfig(**{**asdict(defaults), **kwargs})
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    _check_known(doc, {"seed", "sim", "data", "model", "train", "scenario",
                       "paths"}, "config")
    seed = int(_require(doc, "seed", "config"))

    data_sec = doc.get("data", {})
    _check_known(data_sec, {"window_len", "hop", "normalization",
                            "split_ratios"}, "data")
    data = DataConfig(
        window_len=int(data_sec.get("window_len", 1024)),
        hop=int(data_sec.get("hop", 512)),
        normalization=str(data_sec.get("normalization", "unit_rms")),
        split_ratios=tuple(data_sec.get("split_ratios", (0.8, 0.1, 0.1))),
    )
    data.scheme()  # validate early
    if data.window_len < 1 or data.hop < 1:
        raise ConfigError("data.window_len and data.hop must be positive")

    scen = _require(doc, "scenario", "config")
    _check_known(scen, {"name", "source_channels", "target_channels"}, "scenario")
    scenario = ScenarioConfig(
        name=str(scen.get("name", "scenario")),
        source_channels=tuple(int(c) for c in
                              _require(scen, "source_channels", "scenario")),
        target_channels=tuple(int(c) for c in
                              _require(scen, "target_channels", "scenario")),
    )
    if not scenario.source_channels or not scenario.target_channels:
        raise ConfigError("scenario channel lists must be nonempty")
    if set(scenario.source_channels) & set(scenario.target_channels):
        raise ConfigError("scenario.source_channels and "
                          "scenario.target_channels must be disjoint")

    sim = _parse_sim(_require(doc, "sim", "config"), seed)
    for cid in scenario.source_channels + scenario.target_channels:
        if cid not in sim.channels:
            raise ConfigError(f"scenario references channel {cid} which is "
                              "not defined in sim.channels")

    paths_sec = doc.get("paths", {})
    _check_known(paths_sec, {"data_dir", "out_dir"}, "paths")
    paths = PathsConfig(data_dir=str(paths_sec.get("data_dir", "data")),
                        out_dir=str(paths_sec.get("out_dir", "out")))

    return ExperimentConfig(
        seed=seed,
        sim=sim,
        data=data,
        model=_parse_model(doc.get("model", {})),
        train=_parse_train(doc.get("train", {}), seed),
        scenario=scenario,
        paths=paths,
        base_dir=Path(path).resolve().parent,
    )


@contextmanager
def _output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".crossrf.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_run_info(out_dir: Path, command: str, started: float) -> None:
    info = {
        "command": command,
        "started_utc": datetime.datetime.fromtimestamp(
            started, tz=datetime.timezone.utc).isoformat(),
        "duration_s": round(time.time() - started, 3),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    with open(out_dir / "run_info.json", "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=1)
        fh.write("\n")


def _filtered_manifest(manifest: Manifest, channel_ids) -> Manifest:
    wanted = set(channel_ids)
    return Manifest(entries=[e for e in manifest.entries
                             if e.channel_id in wanted])


def _load_manifest(cfg: ExperimentConfig) -> Manifest:
    path = cfg.data_dir / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(
            f"manifest {path} not found; run 'crossrf simulate' first")
    return load_manifest(path)


def _datasets(cfg: ExperimentConfig, channel_ids, domain: Domain):
    manifest = _filtered_manifest(_load_manifest(cfg), channel_ids)
    if not manifest.entries:
        raise ConfigError(f"no captures for channels {sorted(channel_ids)} "
                          "in the manifest")
    return build_dataset(
        manifest, cfg.data.window_len, cfg.data.hop, cfg.data.scheme(),
        cfg.data.split_ratios, cfg.seed, base_dir=cfg.data_dir, domain=domain)


def _load_bundle(path: Path):
    if not path.exists():
        raise FileNotFoundError(
            f"checkpoint {path} not found; run the preceding stage first")
    return load_checkpoint(path)


def cmd_simulate(cfg: ExperimentConfig, threads=None) -> int:
    manifest = synth_dataset(cfg.sim, cfg.data_dir, threads=threads)
    print(f"wrote {len(manifest.entries)} captures to {cfg.data_dir}")
    return EXIT_OK


def cmd_train_source(cfg: ExperimentConfig) -> int:
    from .figures import plot_stage_log

    train, val, _ = _datasets(cfg, cfg.scenario.source_channels, Domain.SOURCE)
    bundle = build_models(cfg.model, train.num_classes, cfg.seed,
                          grl_lambda=cfg.train.grl_lambda)
    _, _, log = train_source(train, val, cfg.train, bundle)
    out = cfg.out_dir
    save_checkpoint(bundle, out / SOURCE_CHECKPOINT)
    write_stage_log(log, out / "source_log.csv")
    plot_stage_log(log, out / "source_curves.png", title="source training")
    print(f"source training done: best val accuracy "
          f"{100.0 * log.best_val_accuracy():.2f}% "
          f"({len(log.rows)} epochs); checkpoint at {out / SOURCE_CHECKPOINT}")
    return EXIT_OK


def cmd_adapt(cfg: ExperimentConfig) -> int:
    from .figures import plot_stage_log

    bundle = _load_bundle(cfg.out_dir / SOURCE_CHECKPOINT)
    source_train, _, _ = _datasets(cfg, cfg.scenario.source_channels,
                                   Domain.SOURCE)
    target_train, target_val, _ = _datasets(cfg, cfg.scenario.target_channels,
                                            Domain.TARGET)
    _, _, log = adapt_target(bundle, source_train,
                             target_train.without_labels(), target_val,
                             cfg.train)
    out = cfg.out_dir
    save_checkpoint(bundle, out / TARGET_CHECKPOINT)
    write_stage_log(log, out / "adapt_log.csv")
    plot_stage_log(log, out / "adapt_curves.png", title="target adaptation")
    print(f"adaptation done: best target val accuracy "
          f"{100.0 * log.best_val_accuracy():.2f}% "
          f"({len(log.rows)} epochs); checkpoint at {out / TARGET_CHECKPOINT}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    from .figures import plot_comparison, plot_confusion

    bundle = _load_bundle(cfg.out_dir / TARGET_CHECKPOINT)
    enc_cfg = bundle.config.encoder
    _, _, source_test = _datasets(cfg, cfg.scenario.source_channels,
                                  Domain.SOURCE)
    _, _, target_test = _datasets(cfg, cfg.scenario.target_channels,
                                  Domain.TARGET)
    _, preds_src = evaluate(bundle.source_encoder, bundle.classifier,
                            enc_cfg, source_test)
    _, preds_before = evaluate(bundle.source_encoder, bundle.classifier,
                               enc_cfg, target_test)
    _, preds_after = evaluate(bundle.target_encoder, bundle.classifier,
                              enc_cfg, target_test)
    report = comparison_report(
        cfg.scenario.name,
        [(preds_src, source_test.labels_array()),
         (preds_before, target_test.labels_array()),
         (preds_after, target_test.labels_array())],
        bundle.num_classes)

    out = cfg.out_dir
    write_report_csv(report, out / "report.csv")
    write_report_json(report, out / "report.json")
    for stage in STAGES:
        write_confusion_csv(report.matrices[stage], out / f"confusion_{stage}.csv")
        plot_confusion(report.matrices[stage], out / f"confusion_{stage}.png",
                       title=f"{cfg.scenario.name}: {stage.replace('_', ' ')}")
    plot_comparison(report, out / "comparison.png")
    print(f"{report.scenario}: source only {report.source_only_acc:.2f}% | "
          f"target before {report.target_before_acc:.2f}% | "
          f"target after {report.target_after_acc:.2f}%")
    return EXIT_OK


def cmd_search(cfg: ExperimentConfig, budget: int) -> int:
    bundle = _load_bundle(cfg.out_dir / SOURCE_CHECKPOINT)
    source_train, _, _ = _datasets(cfg, cfg.scenario.source_channels,
                                   Domain.SOURCE)
    target_train, target_val, _ = _datasets(cfg, cfg.scenario.target_channels,
                                            Domain.TARGET)
    best_cfg, trials = hyper_search(
        SearchSpace(), budget, cfg.seed, bundle, source_train,
        target_train.without_labels(), target_val, cfg.train)
    out = cfg.out_dir
    sampled = ("lr_target", "lambda_adv", "lambda_distill", "temperature",
               "grl_lambda")
    with open(out / "trials.csv", "w", encoding="utf-8") as fh:
        fh.write("trial," + ",".join(sampled) + ",val_accuracy\n")
        for t in trials:
            vals = ",".join(f"{getattr(t.config, n):.6g}" for n in sampled)
            fh.write(f"{t.index},{vals},{t.val_accuracy:.6f}\n")
    with open(out / "best_config.json", "w", encoding="utf-8") as fh:
        json.dump({n: getattr(best_cfg, n) for n in sampled}, fh, indent=1)
        fh.write("\n")
    best_acc = max(t.val_accuracy for t in trials)
    print(f"search done: {len(trials)} trials, best val accuracy "
          f"{100.0 * best_acc:.2f}%; best config at {out / 'best_config.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossrf",
        description="Cross-channel RF fingerprinting: simulate, train, "
                    "adapt, evaluate, search.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_budget in (("simulate", False), ("train-source", False),
                               ("adapt", False), ("evaluate", False),
                               ("search", True)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the experiment seed")
        if needs_budget:
            p.add_argument("--budget", type=int, default=10,
                           help="number of search trials")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads_env = os.environ.get("CROSSRF_THREADS")
    threads = int(threads_env) if threads_env else None
    started = time.time()
    try:
        cfg = load_experiment_config(args.config)
        if args.seed is not None:
            cfg.seed = int(args.seed)
            cfg.sim.seed = cfg.seed
            cfg.train.seed = cfg.seed
        if args.out is not None:
            cfg.paths.out_dir = args.out
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        with _output_lock(cfg.out_dir):
            if args.command == "simulate":
                code = cmd_simulate(cfg, threads=threads)
            elif args.command == "train-source":
                code = cmd_train_source(cfg)
            elif args.command == "adapt":
                code = cmd_adapt(cfg)
            elif args.command == "evaluate":
                code = cmd_evaluate(cfg)
            else:
                code = cmd_search(cfg, args.budget)
            _write_run_info(cfg.out_dir, args.command, started)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (IQFileError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
