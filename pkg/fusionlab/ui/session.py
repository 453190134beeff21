import itertools
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from prompt_toolkit.output import DummyOutput

from ..config.logs import setup_logging, violation
from ..core.decoder import DecoderWeights, load_weights
from ..core.depthprior import ConfidenceNet
from ..core.errors import ConfigError, FusionLabError
from ..core.evalkit import EvalReport, Table, pilot_report
from ..core.masking import MASKERS, MaskKind, MaskPolicy, SceneInputs, point_pixels, apply_policy
from ..core.matching import supervision_stats
from ..core.pipeline import SplitData, TrainResult, collect_pilot, evaluate_samples, fit_depth_prior, \
    sample_loss, train
from ..core.scenesim import derive_seed, generate_split, read_dataset, write_dataset
from ..core.types import DomainName, PassKind, QueryOrigin
from .artifacts import bar_chart, line_chart, mask_image, write_csv, write_svg, write_table
from .summary_view import SummaryView

logger = logging.getLogger(__name__)

ABLATION_AXES = ('QDL', 'LGDP', 'CCM')
MASK_STUDY = (MaskKind.NONE, MaskKind.IMAGE_GRID, MaskKind.MODAL, MaskKind.CONSISTENT_GRID,
              MaskKind.COMPLEMENTARY_GRID, MaskKind.COMPLEMENTARY_RANDOM)
MASK_SCENES = 4


def parse_ablation(spec: Optional[str]) -> List[Dict[str, object]]:
    """Runs for an ablation spec: a comma list of toggles from QDL, LGDP, CCM
    (full 2^k grid, unnamed toggles stay on) or "masks" (one run per
    masking variant)"""
    if spec is None or spec.strip() == '':
        spec = ','.join(ABLATION_AXES)
    spec = spec.strip()
    if spec.lower() == 'masks':
        return [{'name': kind.value, 'QDL': True, 'LGDP': True, 'CCM': True, 'mask': kind} for kind in MASK_STUDY]
    axes = [a.strip().upper() for a in spec.split(',') if a.strip()]
    for a in axes:
        if a not in ABLATION_AXES:
            raise ConfigError("--ablate", f"unknown toggle {a!r}, expected {', '.join(ABLATION_AXES)} or 'masks'")
    if len(set(axes)) != len(axes):
        raise ConfigError("--ablate", f"duplicate toggle in {spec!r}")
    runs = []
    for values in itertools.product((False, True), repeat=len(axes)):
        toggles = {a: True for a in ABLATION_AXES}
        toggles.update(dict(zip(axes, values)))
        on = [a for a in ABLATION_AXES if toggles[a]]
        toggles['name'] = '+'.join(on) if on else 'baseline'
        toggles['mask'] = None
        runs.append(toggles)
    return runs


class BatchSession:
    """Runs one command against an experiment config and reports an exit code"""

    def __init__(self, config, out: Optional[Path] = None, splits: Optional[Sequence[str]] = None,
                 ablate: Optional[str] = None, quiet: bool = False):
        self.config = config
        self.out = Path(out) if out is not None else config.paths.out
        self.split_names = list(splits) if splits else None
        self.ablate = ablate
        self.view = SummaryView(output=DummyOutput() if quiet else None)
        self.written: List[Path] = []
        self._net: Optional[ConfidenceNet] = None
        self._net_loaded = False
        self.commands = {
            'gen': self.cmd_gen,
            'pilot': self.cmd_pilot,
            'train': self.cmd_train,
            'eval': self.cmd_eval,
            'mask': self.cmd_mask,
            'ablate': self.cmd_ablate,
        }
        self.monitor = setup_logging(config)

    @property
    def radius(self) -> float:
        return self.config.sim.scene_radius

    @property
    def threads(self) -> int:
        return self.config.threads

    def run(self, command: str) -> int:
        """Handle a command; 0 iff every output was written and no invariant was violated"""
        if command not in self.commands:
            self.view.show_error(f"unknown command: {command}")
            return 1
        try:
            self.commands[command]()
        except FusionLabError as e:
            self.view.show_error(str(e))
            return 1
        except OSError as e:
            where = e.filename if e.filename is not None else ''
            self.view.show_error(f"{where}: {e.strerror or e}" if where else str(e))
            return 1
        finally:
            if self.config.debug:
                self.view.show_debug_log(self.config.debug_messages)
        if self.monitor.violations:
            self.view.show_status(False, f"{self.monitor.violations} invariant violation(s)")
            return 1
        self.view.show_written(self.written)
        return 0

    def _write_table(self, name: str, table: Table) -> Path:
        path = write_table(self.out / f"{name}.csv", table)
        self.written.append(path)
        return path

    def _write_svg(self, name: str, svg: str) -> Path:
        path = write_svg(self.out / f"{name}.svg", svg)
        self.written.append(path)
        return path

    def _splits(self):
        return self.config.select_splits(self.split_names)

    def _dataset_path(self, name: str) -> Path:
        return self.config.paths.dataset / f"{name}.jsonl"

    def _load(self, spec) -> SplitData:
        scenes = read_dataset(self._dataset_path(spec.name))
        return SplitData.build(spec.name, scenes, self.config.noise, spec.base_seed(self.config.seed))

    def _train_data(self) -> SplitData:
        return self._load(self.config.split(self.config.train.split))

    def _depth_net(self) -> Optional[ConfidenceNet]:
        """Confidence net from the configured file, else fitted on the training split"""
        if self._net_loaded:
            return self._net
        path = self.config.paths.confidence
        if path is not None and path.exists():
            self._net = ConfidenceNet.load(path)
        else:
            data = self._train_data()
            self._net, curve = fit_depth_prior(data.scenes, data.proposals, self.config.depth,
                                               data.split_seed, self.config.seed)
            target = self.out / 'confidence_net.json'
            target.parent.mkdir(parents=True, exist_ok=True)
            self._net.save(target)
            self.written.append(target)
            self._write_table('confidence_curve', Table(('epoch', 'l1_m'), list(enumerate(curve))))
        self._net_loaded = True
        return self._net

    def cmd_gen(self):
        """Generate every configured split"""
        cfg = self.config
        cfg.paths.dataset.mkdir(parents=True, exist_ok=True)
        table = Table(('split', 'domain', 'severity', 'scenes', 'mean_points', 'mean_objects'))
        for spec in self._splits():
            scenes = generate_split(cfg.sim, spec.n_scenes, spec.base_seed(cfg.seed), spec.tag,
                                    cfg.corruption, prefix=spec.name, threads=self.threads)
            path = self._dataset_path(spec.name)
            write_dataset(scenes, path)
            self.written.append(path)
            if read_dataset(path) != scenes:
                violation(f"{path}: dataset does not read back to the generated scenes")
            table.rows.append((
                spec.name, spec.domain.value, spec.severity, len(scenes),
                float(np.mean([len(s.points) for s in scenes])) if scenes else None,
                float(np.mean([len(s.gt_boxes) for s in scenes])) if scenes else None,
            ))
            logger.info(f"{spec.name}: {len(scenes)} scenes")
        self.view.show_table("Generated splits", table)

    def _initial_or_saved_weights(self):
        path = self.config.paths.weights
        if path is not None and path.exists():
            return load_weights(path)
        return DecoderWeights.init(derive_seed(self.config.seed, 11), radius=self.radius)

    def cmd_pilot(self):
        """Proposal quality, per-origin mAP, supervision and depth tables"""
        net = self._depth_net() if self.config.train.depth_prior else None
        weights = self._initial_or_saved_weights()
        splits = {}
        for spec in self._splits():
            data = self._load(spec)
            splits[spec.name] = collect_pilot(data, self.config.depth, self.radius, net, weights, self.threads)
        tables = pilot_report(splits, self.config.eval)
        for name, table in tables.tables().items():
            self._write_table(name, table)
        names = [row[0] for row in tables.ap2d.rows]
        self._write_svg('pilot_ap2d', bar_chart(
            "2D mAP@50: native 2D vs projected 3D proposals", names,
            {'native 2D': [row[1] for row in tables.ap2d.rows],
             'projected 3D': [row[2] for row in tables.ap2d.rows]}, y_max=1.0))
        by_origin: Dict[str, List] = {o.value: [] for o in (QueryOrigin.FROM_2D, QueryOrigin.FROM_3D)}
        for _, origin, value in tables.origin.rows:
            by_origin[origin].append(value)
        self._write_svg('pilot_origin_map', bar_chart("3D mAP per query origin", names, by_origin, y_max=1.0))
        self.view.show_table("2D proposal quality", tables.ap2d)
        self.view.show_table("Matched queries per pass", tables.supervision)
        self.view.show_table("Depth MAE", tables.depth)

    def _run_training(self, name: str, cfg_train, policy: MaskPolicy, out_dir: Path) -> TrainResult:
        data = self._train_data()
        eval_sets = [self._load(spec) for spec in self._splits()]
        net = self._depth_net() if cfg_train.depth_prior else None
        result = train(data, cfg_train, self.config.depth, policy, self.config.seed, self.radius,
                       eval_sets=eval_sets, eval_cfg=self.config.eval, threads=self.threads, net=net)
        for k, v in result.weights.params.items():
            if not np.all(np.isfinite(v)):
                violation(f"{name}: non-finite weights in {k}")
        out_dir.mkdir(parents=True, exist_ok=True)
        weights_path = out_dir / 'weights.json'
        result.weights.save(weights_path)
        self.written.append(weights_path)
        self.written.append(write_csv(
            out_dir / 'metrics.csv', ('epoch', 'split', 'L_2d', 'L_3d', 'L_fused', 'L_total', 'mAP'),
            [(r.epoch, r.split, r.l_2d, r.l_3d, r.l_fused, r.l_total, r.map) for r in result.log]))
        first_split = result.log[0].split
        rows = [r for r in result.log if r.split == first_split]
        self.written.append(write_svg(out_dir / 'loss_curve.svg', line_chart(
            f"{name}: training losses", [r.epoch for r in rows],
            {'L_2d': [r.l_2d for r in rows], 'L_3d': [r.l_3d for r in rows],
             'L_fused': [r.l_fused for r in rows], 'L_total': [r.l_total for r in rows]})))
        return result

    def cmd_train(self):
        """Train the decoder with the configured toggles"""
        result = self._run_training('train', self.config.train, self.config.mask, self.out)
        last = result.log[-1].epoch
        table = Table(('split', 'mAP', 'L_total'),
                      [(r.split, r.map, r.l_total) for r in result.log if r.epoch == last])
        self.view.show_table(f"After {last} epoch(s)", table)

    def _evaluate(self, weights) -> Dict[str, Optional[EvalReport]]:
        reports = {}
        net = self._depth_net() if self.config.train.depth_prior else None
        for spec in self._splits():
            data = self._load(spec)
            samples = data.samples(self.config.depth, self.radius, net, self.threads)
            reports[spec.name] = evaluate_samples(weights, spec.name, samples, self.config.eval, self.threads) \
                if samples else None
        for name, report in reports.items():
            if report is None:
                continue
            bad = [k for k, v in report.ap.items() if not 0.0 <= v <= 1.0]
            if bad or not 0.0 <= report.map <= 1.0:
                violation(f"{name}: AP outside [0, 1] for {bad}")
        return reports

    def _summary(self, rows: Dict[str, Dict[str, Optional[EvalReport]]]) -> Table:
        """Runs by splits, with the mean over target-domain splits"""
        specs = self._splits()
        targets = [s.name for s in specs if s.domain is not DomainName.SOURCE]
        table = Table(('run',) + tuple(s.name for s in specs) + ('mean_target',))
        for run, reports in rows.items():
            values = [reports[s.name].map if reports.get(s.name) is not None else None for s in specs]
            target_values = [reports[t].map for t in targets if reports.get(t) is not None]
            table.rows.append((run, *values, float(np.mean(target_values)) if target_values else None))
        return table

    def _report_tables(self, prefix: str, run: str, reports: Dict[str, Optional[EvalReport]]):
        ap = Table(('run', 'split', 'class', 'threshold', 'AP'))
        origin = Table(('run', 'split', 'origin', 'mAP'))
        metrics = Table(('run', 'split', 'mAP', 'depth_mae_m', 'trans_err_m', 'scale_err', 'orient_err_rad',
                         'absent_classes'))
        for split, r in reports.items():
            if r is None:
                metrics.rows.append((run, split, None, None, None, None, None, ''))
                continue
            for (cls, thr) in sorted(r.ap):
                ap.rows.append((run, split, cls, thr, r.ap[(cls, thr)]))
            for o, v in r.per_origin_map.items():
                origin.rows.append((run, split, o.value, v))
            metrics.rows.append((run, split, r.map, r.depth_mae, r.errors.translation, r.errors.scale,
                                 r.errors.orientation, ' '.join(str(c) for c in r.absent_classes)))
        return {f"{prefix}_ap": ap, f"{prefix}_origin": origin, f"{prefix}_metrics": metrics}

    def cmd_eval(self):
        """Evaluate saved weights on every selected split"""
        path = self.config.paths.weights or (self.out / 'weights.json')
        weights = load_weights(path)
        reports = self._evaluate(weights)
        run = path.parent.name or 'weights'
        for name, table in self._report_tables('eval', run, reports).items():
            self._write_table(name, table)
        summary = self._summary({run: reports})
        self._write_table('eval_summary', summary)
        self.view.show_table("mAP per split", summary)

    def cmd_ablate(self):
        """Train and evaluate a grid of component toggles"""
        runs = parse_ablation(self.ablate)
        summary_rows: Dict[str, Dict[str, Optional[EvalReport]]] = {}
        all_tables: Dict[str, Table] = {}
        ratio = Table(('run', 'split', 'matched2d', 'matched3d', 'ratio'))
        for run in runs:
            cfg_train = replace(self.config.train, decoupled=run['QDL'], depth_prior=run['LGDP'])
            if run['mask'] is not None:
                policy = replace(self.config.mask, kind=run['mask'])
            elif run['CCM']:
                policy = self.config.mask
            else:
                policy = replace(self.config.mask, kind=MaskKind.NONE)
            name = str(run['name'])
            logger.info(f"ablation run {name}")
            result = self._run_training(name, cfg_train, policy, self.out / 'runs' / name)
            summary_rows[name] = dict(result.reports)
            for key, table in self._report_tables('ablation', name, result.reports).items():
                merged = all_tables.setdefault(key, Table(table.header))
                merged.rows.extend(table.rows)
            net = result.net
            for spec in self._splits():
                samples = self._load(spec).samples(self.config.depth, self.radius, net, self.threads)
                steps = [sample_loss(result.weights, s, decoupled=False) for s in samples if len(s.queries)]
                stats = supervision_stats([(st.matches[PassKind.FUSED], st.outputs[PassKind.FUSED].origins)
                                           for st in steps],
                                          n_samples=len(samples))
                ratio.rows.append((name, spec.name, stats.mean_matched_2d, stats.mean_matched_3d, stats.ratio))
        for key, table in all_tables.items():
            self._write_table(key, table)
        self._write_table('ablation_supervision', ratio)
        summary = self._summary(summary_rows)
        self._write_table('ablation_summary', summary)
        self._write_svg('ablation_summary', bar_chart(
            "mAP per run and split", [str(h) for h in summary.header[1:-1]],
            {row[0]: list(row[1:-1]) for row in summary.rows}, y_max=1.0))
        self.view.show_table("Ablation summary (mAP)", summary)

    def cmd_mask(self):
        """Masked-fraction and retained-point statistics per masking variant"""
        cfg = self.config
        scenes = generate_split(cfg.sim, MASK_SCENES, derive_seed(cfg.seed, 99), cfg.splits[0].tag,
                                cfg.corruption, prefix='mask', threads=self.threads)
        rows = Table(('variant', 'scene', 'camera', 'masked_fraction', 'points_retained_fraction',
                      'image_visible_fraction'))
        summary = Table(('variant', 'masked_fraction', 'points_retained_fraction', 'image_visible_fraction'))
        for kind in MASK_STUDY:
            policy = replace(cfg.mask, kind=kind, p_max=1.0, curriculum=False)
            masker = MASKERS[kind](policy)
            per_variant = []
            for si, scene in enumerate(scenes):
                masks = [masker.make_mask(cam, derive_seed(cfg.seed, si, ci))
                         for ci, cam in enumerate(scene.cameras)]
                rig = SceneInputs.unmasked(scene.cameras, scene.points)
                masked = apply_policy(rig, policy, 0, 1, derive_seed(cfg.seed, si), masks=masks)
                for ci, cam in enumerate(scene.cameras):
                    stats = self._mask_row(cam, scene.points, masked, ci)
                    rows.rows.append((kind.value, scene.id, ci) + stats)
                    per_variant.append(stats)
                    if kind in (MaskKind.COMPLEMENTARY_GRID, MaskKind.COMPLEMENTARY_RANDOM) \
                            and stats[1] is not None and abs(stats[1] + stats[2] - 1.0) > 1e-12:
                        violation(f"{kind.value} {scene.id}/{ci}: retained and visible points overlap")
                    if si == 0 and ci == 0:
                        self._write_svg(f"mask_{kind.value}", self._mask_svg(kind, cam, scene.points, masked, ci))
            summary.rows.append((kind.value,) + tuple(
                float(np.mean([s[j] for s in per_variant if s[j] is not None]))
                if any(s[j] is not None for s in per_variant) else None for j in range(3)))
        self._write_table('mask_stats', rows)
        self._write_table('mask_summary', summary)
        self.view.show_table("Masking variants", summary)

    @staticmethod
    def _mask_row(cam, points: np.ndarray, masked: SceneInputs, index: int) -> Tuple:
        image = masked.images[index]
        masked_fraction = float(1.0 - image.mean())
        pix, valid = point_pixels(cam, points)
        n = int(valid.sum())
        if n == 0:
            return masked_fraction, None, None
        kept = _retained(points, masked.points)
        visible = image[pix[valid, 1], pix[valid, 0]].astype(bool)
        return masked_fraction, float(kept[valid].sum()) / n, float(visible.sum()) / n

    @staticmethod
    def _mask_svg(kind: MaskKind, cam, points: np.ndarray, masked: SceneInputs, index: int) -> str:
        pix, valid = point_pixels(cam, points)
        kept = _retained(points, masked.points)
        uv = pix + 0.5
        return mask_image(f"{kind.value}: camera {index}", masked.images[index],
                          uv[valid & kept], uv[valid & ~kept])


def _retained(original: np.ndarray, remaining: np.ndarray) -> np.ndarray:
    """Which rows of original survive in remaining (maskers only drop rows, in order)"""
    keep = np.zeros(len(original), dtype=bool)
    j = 0
    for i in range(len(original)):
        if j < len(remaining) and np.array_equal(original[i], remaining[j]):
            keep[i] = True
            j += 1
    return keep
