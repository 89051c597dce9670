"""Pipeline stages behind the CLI commands.

Each stage reads the previous stage's files, so preprocess -> encode ->
evaluate composes the full pipeline with no hidden state. Every command
rewrites the fully resolved run config beside its outputs.
"""

from __future__ import annotations

import dataclasses
import json
import time
import zlib
from multiprocessing import Pool
from pathlib import Path

import cv2
import numpy as np

from . import evaluate as ev
from .config import RunConfig, save_config
from .dataset import BG_LABEL, Scan, load_scan, read_manifest
from .descriptors import DescriptorSet, read_pvdf, toy_descriptor, write_pvdf
from .encode import (ENCODING_BOW, EncodedDataset, encode_bow, encode_fv,
                     save_encoded_dataset)
from .errors import (MissingDescriptors, ModelMissing, MycobowError,
                     NoForegroundPatches)
from .imaging import (GATE_BG, GATE_FG, ForegroundMask, PatchSpec,
                      augment_patch, compute_intensity_limits, crop_patch,
                      downscale, extract_patch_grid, grayscale, save_mask,
                      segment_foreground, stretch_contrast)
from .learn import (RfConfig, SvmConfig, load_forest, load_svm,
                    rf_decision_values, rf_predict, rf_train, save_forest,
                    save_svm, svm_decision_values, svm_predict, svm_train)

N_AUG_VARIANTS = 5  # rot90/180/270, mirror, noise


def patch_id_for(scan_id: str, row: int, col: int) -> str:
    return f"{scan_id}:{row}:{col}"


def _patch_spec(cfg: RunConfig) -> PatchSpec:
    return PatchSpec(patch_size=cfg.patch_size, stride=cfg.stride,
                     fg_min_ratio=cfg.fg_min_ratio,
                     bg_max_ratio=cfg.bg_max_ratio)


def working_image(scan: Scan, cfg: RunConfig):
    lo, hi = compute_intensity_limits(scan, cfg.low_percentile,
                                      cfg.high_percentile)
    normalized = stretch_contrast(scan, lo, hi)
    return downscale(normalized, cfg.scale)


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir)


def _parallel_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with Pool(processes=min(workers, len(items))) as pool:
        return pool.map(fn, items)


# --- preprocess -----------------------------------------------------------

def _preprocess_one(args):
    record, cfg_dict, root = args
    cfg = RunConfig(**cfg_dict)
    scan = load_scan(record, root=root)
    image = working_image(scan, cfg)
    mask = segment_foreground(image, cfg.blur_sigma, cfg.threshold)
    grid = extract_patch_grid(mask, _patch_spec(cfg))
    mask_path = _out(cfg) / "masks" / f"{record.scan_id}.png"
    save_mask(mask, mask_path)
    return record.scan_id, grid.entries


def cmd_preprocess(cfg: RunConfig) -> Path:
    """Write per-scan masks and the gated patch index."""
    records = read_manifest(cfg.manifest)
    root = Path(cfg.manifest).parent
    out = _out(cfg)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    cfg_dict = dataclasses.asdict(cfg)
    results = _parallel_map(
        _preprocess_one,
        [(rec, cfg_dict, root) for rec in records],
        cfg.effective_workers(),
    )

    index_path = out / "patch_index.tsv"
    with open(index_path, "w") as fh:
        fh.write("scan_id\trow\tcol\tgate\n")
        for scan_id, entries in results:
            for row, col, gate in entries:
                fh.write(f"{scan_id}\t{row}\t{col}\t{gate}\n")
    save_config(cfg, out / "run_config.json")
    return index_path


def read_patch_index(path) -> list:
    entries = []
    with open(path) as fh:
        header = fh.readline()
        if header.strip() != "scan_id\trow\tcol\tgate":
            raise MycobowError(f"{path}: unexpected patch index header")
        for line in fh:
            scan_id, row, col, gate = line.rstrip("\n").split("\t")
            entries.append((scan_id, int(row), int(col), gate))
    return entries


# --- descriptors ----------------------------------------------------------

def _augment_seed(base_seed: int, scan_id: str, row: int, col: int) -> list:
    return [base_seed, zlib.crc32(scan_id.encode()), row, col]


def _toy_descriptors_one(args):
    record, cfg_dict, root, gated = args
    cfg = RunConfig(**cfg_dict)
    scan = load_scan(record, root=root)
    image = working_image(scan, cfg)
    pixels = grayscale(image.pixels)

    sets = []
    for row, col, gate in gated:
        patch = crop_patch(pixels, row, col, cfg.patch_size)
        pid = patch_id_for(record.scan_id, row, col)
        sets.append(toy_descriptor(patch, cfg.toy_grid_rows,
                                   cfg.toy_grid_cols, cfg.descriptor_dim,
                                   patch_id=pid))
        if cfg.augment_training:
            seed = np.random.SeedSequence(
                _augment_seed(cfg.seed, record.scan_id, row, col)
            ).generate_state(1)[0]
            variants = augment_patch(patch, int(seed))
            for i, variant in enumerate(variants[1:], start=1):
                sets.append(toy_descriptor(
                    variant, cfg.toy_grid_rows, cfg.toy_grid_cols,
                    cfg.descriptor_dim, patch_id=f"{pid}#a{i}",
                ))
    path = _out(cfg) / "descriptors" / f"{record.scan_id}.pvdf"
    write_pvdf(sets, path)
    return record.scan_id


def ensure_descriptors(cfg: RunConfig, records, index_entries,
                       reuse: bool = False) -> None:
    """Materialize one PVDF per scan under the output directory."""
    out_dir = _out(cfg) / "descriptors"
    out_dir.mkdir(parents=True, exist_ok=True)
    by_scan = {}
    for scan_id, row, col, gate in index_entries:
        if gate in (GATE_FG, GATE_BG):
            by_scan.setdefault(scan_id, []).append((row, col, gate))

    if cfg.descriptor_source == "toy":
        cfg_dict = dataclasses.asdict(cfg)
        root = Path(cfg.manifest).parent
        todo = [
            (rec, cfg_dict, root, by_scan.get(rec.scan_id, []))
            for rec in records
            if by_scan.get(rec.scan_id)
            and not (reuse and (out_dir / f"{rec.scan_id}.pvdf").exists())
        ]
        _parallel_map(_toy_descriptors_one, todo, cfg.effective_workers())
        return

    if cfg.augment_training:
        raise MycobowError(
            "augmentation needs patch pixels; not available with the "
            "file descriptor source"
        )
    src = Path(cfg.descriptor_dir)
    missing = []
    for rec in records:
        wanted = by_scan.get(rec.scan_id)
        if not wanted:
            continue
        source = src / f"{rec.scan_id}.pvdf"
        if not source.exists():
            missing.extend(
                patch_id_for(rec.scan_id, r, c) for r, c, _ in wanted
            )
            continue
        sets = read_pvdf(source)
        have = {s.patch_id for s in sets}
        for row, col, _ in wanted:
            pid = patch_id_for(rec.scan_id, row, col)
            if pid not in have:
                missing.append(pid)
        target = out_dir / f"{rec.scan_id}.pvdf"
        if not (reuse and target.exists()):
            target.write_bytes(source.read_bytes())
    if missing:
        raise MissingDescriptors(sorted(missing))


def build_patch_table(cfg: RunConfig, records, index_entries) -> ev.PatchTable:
    """Assemble the evaluation table from persisted per-scan descriptors."""
    info = {rec.scan_id: rec for rec in records}
    table = ev.PatchTable(patch_ids=[], scan_ids=[], species=[],
                          preparations=[], gates=[], dsets=[], augmented=[])
    missing = []
    for rec in records:
        gated = [(r, c, g) for sid, r, c, g in index_entries
                 if sid == rec.scan_id and g in (GATE_FG, GATE_BG)]
        if not gated:
            continue
        path = _out(cfg) / "descriptors" / f"{rec.scan_id}.pvdf"
        if not path.exists():
            missing.extend(patch_id_for(rec.scan_id, r, c)
                           for r, c, _ in gated)
            continue
        by_id = {s.patch_id: s for s in read_pvdf(path)}
        for row, col, gate in gated:
            pid = patch_id_for(rec.scan_id, row, col)
            base = by_id.get(pid)
            if base is None:
                missing.append(pid)
                continue
            group = [(pid, base, False)]
            for i in range(1, N_AUG_VARIANTS + 1):
                aug = by_id.get(f"{pid}#a{i}")
                if aug is not None:
                    group.append((aug.patch_id, aug, True))
            for name, dset, is_aug in group:
                if cfg.l2_normalize_descriptors:
                    data = dset.data.astype(np.float64)
                    norms = np.sqrt((data ** 2).sum(axis=1, keepdims=True))
                    data = data / np.where(norms > 0, norms, 1.0)
                    dset = DescriptorSet(data=data, patch_id=name,
                                         grid_shape=dset.grid_shape)
                table.patch_ids.append(name)
                table.scan_ids.append(rec.scan_id)
                table.species.append(info[rec.scan_id].species)
                table.preparations.append(rec.preparation_id)
                table.gates.append(gate)
                table.dsets.append(dset)
                table.augmented.append(is_aug)
    if missing:
        raise MissingDescriptors(sorted(missing))
    return table


# --- classifier factory ---------------------------------------------------

def make_classifier_factory(cfg: RunConfig):
    if cfg.classifier == "svm":
        def train(X, y, point: ev.GridPoint):
            scfg = SvmConfig(
                kernel=point.kernel,
                C=point.C,
                gamma=point.gamma if point.gamma is not None else 0.001,
                tol=cfg.svm_tol,
                max_passes=cfg.svm_max_passes,
                seed=cfg.seed,
            )
            model = svm_train(X, y, scfg)
            return model, svm_predict, svm_decision_values
        return train

    def train(X, y, point: ev.GridPoint):
        rcfg = RfConfig(
            n_trees=cfg.rf_trees,
            max_depth=None if cfg.rf_max_depth < 0 else cfg.rf_max_depth,
            max_features=cfg.rf_max_features,
            seed=cfg.seed,
        )
        model = rf_train(X, y, rcfg)
        return model, rf_predict, rf_decision_values
    return train


def _encode_opts(cfg: RunConfig) -> dict:
    return {
        "power_norm": cfg.power_norm,
        "l2_norm": cfg.l2_norm,
        "raw_counts": cfg.bow_raw_counts,
    }


def _vocab_opts(cfg: RunConfig) -> dict:
    return {
        "sample_limit": cfg.vocab_sample_limit,
        "max_iter": cfg.vocab_max_iter,
        "tol": cfg.vocab_tol,
    }


def _load_stage_inputs(cfg: RunConfig):
    records = read_manifest(cfg.manifest)
    index_path = _out(cfg) / "patch_index.tsv"
    if not index_path.exists():
        raise MycobowError(
            f"{index_path} not found; run the preprocess command first"
        )
    return records, read_patch_index(index_path)


# --- encode ---------------------------------------------------------------

def cmd_encode(cfg: RunConfig, reuse: bool = False) -> None:
    """Fit per-run vocabularies on training folds and encode both folds."""
    from .vocab import load_model, save_model, write_model_summary

    records, index_entries = _load_stage_inputs(cfg)
    ensure_descriptors(cfg, records, index_entries, reuse=reuse)
    table = build_patch_table(cfg, records, index_entries)
    plan = ev.split_by_preparation(records)

    out = _out(cfg)
    (out / "vocab").mkdir(parents=True, exist_ok=True)
    (out / "encodings").mkdir(parents=True, exist_ok=True)

    for run, train_ids in enumerate(plan.folds(), start=1):
        model_path = out / "vocab" / f"run{run}.model"
        if reuse and model_path.exists():
            model = load_model(model_path)
        else:
            train_table = table.for_scans(train_ids)
            model = ev.fit_vocabulary(
                train_table.descriptor_matrix(), cfg.encoding, cfg.vocab_k,
                seed=cfg.seed, **_vocab_opts(cfg),
            )
            save_model(model, model_path)
            write_model_summary(model, out / "vocab" / f"run{run}.summary.txt")

        full = table.without_augmented()
        matrix = ev.encode_table(full, model, cfg.encoding,
                                 **_encode_opts(cfg))
        dataset = EncodedDataset(
            encoding=cfg.encoding, vocab_k=cfg.vocab_k,
            descriptor_dim=cfg.descriptor_dim,
            power_norm=cfg.power_norm, l2_norm=cfg.l2_norm,
            patch_ids=list(full.patch_ids), scan_ids=list(full.scan_ids),
            species=list(full.species), preparations=list(full.preparations),
            gates=list(full.gates),
            matrix=matrix.astype(np.float32),
        )
        save_encoded_dataset(dataset, out / "encodings" / f"run{run}.pvev")
    save_config(cfg, out / "run_config.json")


# --- evaluate -------------------------------------------------------------

def _scan_level_accuracy(test_table: ev.PatchTable, predictions,
                         decision_values, class_labels):
    """Majority-vote scan accuracy per species for one outer run."""
    rows_by_scan = {}
    for i, (sid, gate) in enumerate(zip(test_table.scan_ids,
                                        test_table.gates)):
        if gate == GATE_FG:
            rows_by_scan.setdefault(sid, []).append(i)

    species_of = test_table.species_by_scan()
    correct = {}
    total = {}
    scan_rows = []
    for sid in sorted(rows_by_scan):
        rows = rows_by_scan[sid]
        result = ev.aggregate_scan(
            sid,
            [predictions[i] for i in rows],
            decision_values=np.asarray(decision_values)[rows],
            class_labels=class_labels,
        )
        truth = species_of[sid]
        total[truth] = total.get(truth, 0) + 1
        if result.winner == truth:
            correct[truth] = correct.get(truth, 0) + 1
        scan_rows.append((sid, truth, result.winner, dict(result.votes)))

    accuracy = {
        sp: 100.0 * correct.get(sp, 0) / n for sp, n in total.items()
    }
    accuracy["__total__"] = (
        100.0 * sum(correct.values()) / max(sum(total.values()), 1)
    )
    return accuracy, scan_rows


def cmd_evaluate(cfg: RunConfig) -> "ev.EvaluationReport":
    """Outer two-fold protocol with inner grid search; writes all reports."""
    from .vocab import save_model, write_model_summary

    records, index_entries = _load_stage_inputs(cfg)
    desc_dir = _out(cfg) / "descriptors"
    if not desc_dir.exists():
        raise MycobowError(
            f"{desc_dir} not found; run the encode command first"
        )
    table = build_patch_table(cfg, records, index_entries)
    plan = ev.split_by_preparation(records)
    class_labels = ev.class_order([r.species for r in records])
    factory = make_classifier_factory(cfg)

    out = _out(cfg)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(parents=True, exist_ok=True)

    fold_evals = []
    scan_accuracy = []
    chosen = []
    run_scores = []
    prediction_rows = []
    scan_rows_all = []
    wall = 0.0

    folds = plan.folds()
    for run in (1, 2):
        train_ids = folds[run - 1]
        test_ids = folds[2 - run]
        ev.check_disjoint(train_ids, test_ids, f"outer run {run}")
        train_table = table.for_scans(train_ids)
        test_table = table.for_scans(test_ids).without_augmented()

        started = time.perf_counter()
        search = ev.grid_search(
            train_table, cfg.grid(), encoding=cfg.encoding,
            classifier=cfg.classifier, train_classifier=factory,
            inner_folds=cfg.inner_folds, seed=cfg.seed,
            vocab_opts=_vocab_opts(cfg), encode_opts=_encode_opts(cfg),
        )
        best = search.best
        vocab_model = ev.fit_vocabulary(
            train_table.descriptor_matrix(), cfg.encoding, best.k,
            seed=cfg.seed, **_vocab_opts(cfg),
        )
        x_train = ev.encode_table(train_table, vocab_model, cfg.encoding,
                                  **_encode_opts(cfg))
        clf, predict_fn, decision_fn = factory(
            x_train, train_table.labels(), best
        )
        wall += time.perf_counter() - started

        x_test = ev.encode_table(test_table, vocab_model, cfg.encoding,
                                 **_encode_opts(cfg))
        predictions = predict_fn(clf, x_test)
        decisions = decision_fn(clf, x_test)
        truth = test_table.labels()

        fold_evals.append(ev.evaluate_patches(predictions, truth,
                                              class_labels))
        accuracy, scan_rows = _scan_level_accuracy(
            test_table, predictions, decisions, clf.classes
        )
        scan_accuracy.append(accuracy)
        scan_rows_all.append((run, scan_rows))
        chosen.append(best)
        run_scores.append(fold_evals[-1].total)

        for i, pid in enumerate(test_table.patch_ids):
            row = {
                "run": run,
                "patch_id": pid,
                "scan_id": test_table.scan_ids[i],
                "gate": test_table.gates[i],
                "truth": truth[i],
                "predicted": predictions[i],
            }
            for c, label in enumerate(clf.classes):
                row[f"dv_{label}"] = float(decisions[i, c])
            prediction_rows.append(row)

        save_model(vocab_model, out / "models" / f"run{run}.vocab.bin")
        if cfg.classifier == "svm":
            save_svm(clf, out / "models" / f"run{run}.svm.bin")
            summary = clf.summary()
        else:
            save_forest(clf, out / "models" / f"run{run}.rf.bin")
            summary = clf.summary()
        (out / "models" / f"run{run}.summary.txt").write_text(summary)

    # deploy model: all scans, hyperparameters from the stronger run
    deploy_point = chosen[int(np.argmax(run_scores))]
    deploy_vocab = ev.fit_vocabulary(
        table.descriptor_matrix(), cfg.encoding, deploy_point.k,
        seed=cfg.seed, **_vocab_opts(cfg),
    )
    x_all = ev.encode_table(table, deploy_vocab, cfg.encoding,
                            **_encode_opts(cfg))
    deploy_clf, _, _ = factory(x_all, table.labels(), deploy_point)
    save_model(deploy_vocab, out / "models" / "deploy.vocab.bin")
    if cfg.classifier == "svm":
        save_svm(deploy_clf, out / "models" / "deploy.svm.bin")
    else:
        save_forest(deploy_clf, out / "models" / "deploy.rf.bin")

    report = ev.build_report(cfg.method_name(), fold_evals,
                             scan_accuracy_by_fold=scan_accuracy,
                             chosen=chosen, wall_seconds=wall)
    _write_reports(cfg, report, prediction_rows, scan_rows_all,
                   deploy_point)
    save_config(cfg, out / "run_config.json")
    return report


def _point_dict(point: ev.GridPoint) -> dict:
    return {"k": point.k, "kernel": point.kernel, "C": point.C,
            "gamma": point.gamma}


def _write_reports(cfg, report, prediction_rows, scan_rows_all,
                   deploy_point) -> None:
    out = _out(cfg) / "reports"
    out.mkdir(parents=True, exist_ok=True)

    (out / "patch_report.tsv").write_text(ev.render_patch_table(report))
    (out / "scan_report.tsv").write_text(ev.render_scan_table(report))
    for run, fold_eval in enumerate(report.fold_evals, start=1):
        (out / f"confusion_run{run}.tsv").write_text(
            ev.render_confusion(fold_eval)
        )

    chosen = {
        f"run{idx}": _point_dict(p) for idx, p in enumerate(report.chosen, 1)
    }
    chosen["deploy"] = _point_dict(deploy_point)
    with open(out / "chosen_params.json", "w") as fh:
        json.dump(chosen, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if prediction_rows:
        dv_cols = [k for k in prediction_rows[0] if k.startswith("dv_")]
        cols = ["run", "patch_id", "scan_id", "gate", "truth",
                "predicted"] + dv_cols
        lines = ["\t".join(cols)]
        for row in prediction_rows:
            cells = [str(row[c]) if not c.startswith("dv_")
                     else f"{row[c]:.9g}" for c in cols]
            lines.append("\t".join(cells))
        (out / "patch_predictions.tsv").write_text("\n".join(lines) + "\n")

    scan_lines = ["run\tscan_id\ttruth\tpredicted\tvotes"]
    for run, rows in scan_rows_all:
        for sid, truth, winner, votes in rows:
            votes_text = ",".join(
                f"{lab}:{votes[lab]}" for lab in sorted(votes)
            )
            scan_lines.append(f"{run}\t{sid}\t{truth}\t{winner}\t{votes_text}")
    (out / "scan_predictions.tsv").write_text("\n".join(scan_lines) + "\n")

    payload = {
        "method": report.method,
        "class_labels": report.class_labels,
        "per_class": {k: list(v) for k, v in report.per_class.items()},
        "total": list(report.total),
        "scan_per_class": {k: list(v)
                           for k, v in (report.scan_per_class or {}).items()},
        "scan_total": list(report.scan_total or ()),
        "chosen": chosen,
        "confusion": [fe.confusion.tolist() for fe in report.fold_evals],
        "timing": {"wall_seconds": report.wall_seconds},
    }
    with open(out / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- predict --------------------------------------------------------------

def _load_deploy(cfg: RunConfig):
    from .vocab import load_model

    out = _out(cfg) / "models"
    vocab_path = out / "deploy.vocab.bin"
    clf_path = out / ("deploy.svm.bin" if cfg.classifier == "svm"
                      else "deploy.rf.bin")
    if not vocab_path.exists() or not clf_path.exists():
        raise ModelMissing(
            f"deploy model not found under {out}; run evaluate first"
        )
    vocab_model = load_model(vocab_path)
    if cfg.classifier == "svm":
        clf = load_svm(clf_path)
        return vocab_model, clf, svm_predict, svm_decision_values
    clf = load_forest(clf_path)
    return vocab_model, clf, rf_predict, rf_decision_values


def cmd_predict(cfg: RunConfig, scan_path) -> dict:
    """Classify one scan: per-patch predictions plus the majority vote."""
    vocab_model, clf, predict_fn, decision_fn = _load_deploy(cfg)

    pixels = cv2.imread(str(scan_path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise MycobowError(f"cannot read scan image {scan_path}")
    if pixels.ndim == 3 and pixels.shape[2] == 4:
        pixels = pixels[:, :, :3]
    scan_id = Path(scan_path).stem
    scan = Scan(pixels=pixels, species="", preparation_id=0, scan_id=scan_id)

    image = working_image(scan, cfg)
    mask = segment_foreground(image, cfg.blur_sigma, cfg.threshold)
    grid = extract_patch_grid(mask, _patch_spec(cfg))
    gray = grayscale(image.pixels)

    gated = [(r, c, g) for r, c, g in grid.entries
             if g in (GATE_FG, GATE_BG)]
    if not any(g == GATE_FG for _, _, g in gated):
        raise NoForegroundPatches(f"scan {scan_id} has no foreground patches")

    dsets = []
    if cfg.descriptor_source == "toy":
        for row, col, gate in gated:
            patch = crop_patch(gray, row, col, cfg.patch_size)
            dsets.append(toy_descriptor(
                patch, cfg.toy_grid_rows, cfg.toy_grid_cols,
                cfg.descriptor_dim,
                patch_id=patch_id_for(scan_id, row, col),
            ))
    else:
        source = Path(cfg.descriptor_dir) / f"{scan_id}.pvdf"
        if not source.exists():
            raise MissingDescriptors(
                [patch_id_for(scan_id, r, c) for r, c, _ in gated]
            )
        by_id = {s.patch_id: s for s in read_pvdf(source)}
        missing = []
        for row, col, _ in gated:
            pid = patch_id_for(scan_id, row, col)
            if pid not in by_id:
                missing.append(pid)
            else:
                dsets.append(by_id[pid])
        if missing:
            raise MissingDescriptors(missing)

    rows = []
    for dset in dsets:
        if cfg.encoding == ENCODING_BOW:
            rows.append(encode_bow(dset, vocab_model,
                                   raw_counts=cfg.bow_raw_counts).values)
        else:
            rows.append(encode_fv(dset, vocab_model,
                                  power_norm=cfg.power_norm,
                                  l2_norm=cfg.l2_norm).values)
    matrix = np.asarray(rows)
    predictions = predict_fn(clf, matrix)
    decisions = decision_fn(clf, matrix)

    fg_rows = [i for i, (_, _, g) in enumerate(gated) if g == GATE_FG]
    vote = ev.aggregate_scan(
        scan_id,
        [predictions[i] for i in fg_rows],
        decision_values=decisions[fg_rows],
        class_labels=clf.classes,
    )

    patches = []
    for i, (row, col, gate) in enumerate(gated):
        patches.append({
            "patch_id": patch_id_for(scan_id, row, col),
            "row": row,
            "col": col,
            "gate": gate,
            "predicted": predictions[i],
            "decision_values": {
                str(label): float(decisions[i, c])
                for c, label in enumerate(clf.classes)
            },
        })
    return {
        "scan_id": scan_id,
        "winner": vote.winner,
        "votes": {str(k): v for k, v in sorted(vote.votes.items())},
        "patches": patches,
    }


# --- report ---------------------------------------------------------------

def cmd_report(cfg: RunConfig) -> None:
    """Emit the mean-BoW table, nearest-centroid lists, and certainty ranking."""
    from .vocab import kmeans_fit, subsample_descriptors

    records, index_entries = _load_stage_inputs(cfg)
    table = build_patch_table(cfg, records, index_entries).without_augmented()
    plan = ev.split_by_preparation(records)

    out = _out(cfg) / "analysis"
    out.mkdir(parents=True, exist_ok=True)

    # codebook fitted on the first preparation fold only (training side)
    train_table = table.for_scans(plan.fold_1)
    sample = subsample_descriptors(train_table.descriptor_matrix(),
                                   limit=cfg.vocab_sample_limit,
                                   seed=cfg.seed)
    codebook = kmeans_fit(sample, cfg.report_bow_k, seed=cfg.seed,
                          max_iter=cfg.vocab_max_iter, tol=cfg.vocab_tol)

    fg_idx = [i for i, g in enumerate(table.gates) if g == GATE_FG]
    fg_table = table.subset(fg_idx)
    by_species = {}
    for i, sp in enumerate(fg_table.species):
        vec = encode_bow(fg_table.dsets[i], codebook)
        by_species.setdefault(sp, []).append(vec)
    stats = ev.mean_bow_report(by_species)

    lines = ["\t".join(["species", "stat"]
                       + [f"c{j}" for j in range(cfg.report_bow_k)])]
    for sp in sorted(stats):
        mean, var = stats[sp]
        lines.append("\t".join([sp, "mean"] + [f"{v:.6f}" for v in mean]))
        lines.append("\t".join([sp, "var"] + [f"{v:.6f}" for v in var]))
    (out / "mean_bow.tsv").write_text("\n".join(lines) + "\n")

    nearest = ev.nearest_patches_report(codebook, fg_table.dsets,
                                        n=cfg.report_neighbors)
    lines = ["centroid\trank\tpatch_id\tdistance"]
    for j, ranked in enumerate(nearest):
        for rank, (pid, dist) in enumerate(ranked):
            lines.append(f"{j}\t{rank}\t{pid}\t{dist:.6f}")
    (out / "nearest_patches.tsv").write_text("\n".join(lines) + "\n")

    predictions_path = _out(cfg) / "reports" / "patch_predictions.tsv"
    if not predictions_path.exists():
        raise MycobowError(
            f"{predictions_path} not found; run evaluate before report"
        )
    patch_ids, labels, values, class_labels = _read_predictions(
        predictions_path
    )
    ranking = ev.certainty_ranking(patch_ids, labels, values, class_labels)
    lines = ["species\trank\tpatch_id\tdecision_value"]
    for sp in sorted(ranking):
        for rank, (pid, value) in enumerate(ranking[sp]):
            lines.append(f"{sp}\t{rank}\t{pid}\t{value:.9g}")
    (out / "certainty_ranking.tsv").write_text("\n".join(lines) + "\n")
    save_config(cfg, _out(cfg) / "run_config.json")


def _read_predictions(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        dv_cols = [c for c in header if c.startswith("dv_")]
        class_labels = [c[3:] for c in dv_cols]
        idx = {c: i for i, c in enumerate(header)}
        patch_ids, labels, rows = [], [], []
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            if cells[idx["gate"]] != GATE_FG:
                continue
            patch_ids.append(cells[idx["patch_id"]])
            labels.append(cells[idx["predicted"]])
            rows.append([float(cells[idx[c]]) for c in dv_cols])
    return patch_ids, labels, np.asarray(rows), class_labels
