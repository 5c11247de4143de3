"""
advcube Main Entry Point
Command-line front end: spectral index, synthetic data, detector training,
cube attacks, evaluation grids and renderings
"""
import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError

import config
from attack import AttackConfig, init_params, load_attack_result, optimize_cube, save_attack_result
from config import load_config_file
from cubes import (SceneError, ScenegenConfig, build_attack_sets, load_labeled_dataset, read_cube,
                   synth_material_library, write_dataset)
from detector import ArchConfig, TrainConfig, build_detector, evaluate_detector, load_model, save_model, \
    train_two_stage
from evaluation import (ExperimentGrid, GridAssets, GridRowResult, attack_metrics, render_cube_images, run_grid,
                        write_report, write_seed_details)
from logger import RunContext, setup_logger
from manifest import build_manifest, manifest_path_for, write_manifest
from spectra import (build_spectral_index, load_band_table, load_material_library, load_solar_spectrum,
                     load_spectral_index, save_spectral_index, write_material_library)
from utils import PipelineError, format_duration, save_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


@dataclass
class CommandResult:
    """What a handler produced, for the run manifest"""
    anchor: str
    outputs: List[str]
    inputs: List[str] = field(default_factory=list)
    config_paths: Dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None


class AdvCubeCLI:
    """Main command-line application"""

    def __init__(self):
        self.handlers: Dict[str, Callable[[argparse.Namespace], CommandResult]] = {}
        self.parser = self.setup_parser()

    # ------------------------------------------------------------
    # parser
    # ------------------------------------------------------------

    def setup_parser(self) -> argparse.ArgumentParser:
        """Set up the subcommand parser"""
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument('--seed', type=int, default=None,
                            help='random seed; overrides the seed of the loaded config')
        common.add_argument('--threads', type=int, default=config.DEFAULT_THREADS,
                            help='worker threads for inner parallelism (default: %(default)s)')
        common.add_argument('--log-level', default=config.LOG_LEVEL,
                            choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='log verbosity (stderr)')
        common.add_argument('--log-file', default=config.LOG_FILE or None,
                            help='also write logs to this file')
        common.add_argument('--json-logs', action='store_true', default=config.LOG_JSON,
                            help='emit logs as one JSON object per line')

        parser = argparse.ArgumentParser(
            prog='advcube',
            description='Adversarial cubes against a multispectral cloud detector')
        sub = parser.add_subparsers(dest='command', metavar='COMMAND', required=True)

        p = self.add_command(sub, common, 'build-index', self.handle_build_index,
                             'build the spectral index from a material library')
        p.add_argument('--materials', help='material library CSV (wavelength_nm,<name>...)')
        p.add_argument('--synth-materials', type=int, default=80,
                       help='generate this many synthetic paints when --materials is not given')
        p.add_argument('--materials-out', help='write the material library used to this CSV')
        p.add_argument('--sort-samples', action='store_true', help='sort library rows by wavelength first')
        p.add_argument('--bands', default=config.BAND_TABLE_FILE, help='band table CSV (band,min_nm,max_nm)')
        p.add_argument('--solar', default=config.SOLAR_SPECTRUM_FILE,
                       help='solar spectrum CSV (wavelength_nm,irradiance)')
        p.add_argument('--out', required=True, help='spectral index CSV to write')

        p = self.add_command(sub, common, 'gen-data', self.handle_gen_data,
                             'generate the synthetic TH30/TH70 dataset')
        p.add_argument('--config', default=config.DEFAULT_SCENEGEN_FILE, help='ScenegenConfig JSON')
        p.add_argument('--out', required=True, help='dataset directory (cubes/ and labels.csv)')
        p.add_argument('--splits', nargs='+', default=['train', 'val', 'test'],
                       choices=['train', 'val', 'test'], help='splits to generate')

        p = self.add_command(sub, common, 'train', self.handle_train,
                             'two-stage detector training (TH30 then TH70)')
        p.add_argument('--th30', required=True, help='dataset directory labelled at 30%% for stage 1')
        p.add_argument('--th70', required=True, help='dataset directory labelled at 70%% for stage 2')
        p.add_argument('--arch', default=config.DEFAULT_ARCH_FILE, help='ArchConfig JSON')
        p.add_argument('--config', default=config.DEFAULT_TRAIN_FILE, help='TrainConfig JSON')
        p.add_argument('--scenegen', default=config.DEFAULT_SCENEGEN_FILE,
                       help='ScenegenConfig JSON whose thresholds label the two stages')
        p.add_argument('--out', required=True, help='model container (.msdm) to write')
        p.add_argument('--history', help='per-epoch history CSV (default: <out>.history.csv)')

        p = self.add_command(sub, common, 'attack', self.handle_attack,
                             'optimize adversarial cube(s) against a trained detector')
        p.add_argument('--model', required=True, help='detector model container (.msdm)')
        p.add_argument('--index', required=True, help='spectral index CSV')
        p.add_argument('--scenegen', default=config.DEFAULT_SCENEGEN_FILE,
                       help='ScenegenConfig JSON used to build the attack sets')
        p.add_argument('--config', default=config.DEFAULT_ATTACK_FILE, help='AttackConfig JSON')
        p.add_argument('--loss', help="loss terms, e.g. 'psi', 'psi+nps', 'psi+nps+cloak'")
        p.add_argument('--roa', choices=['hills', 'desert'], help='terrain of the region of attack')
        p.add_argument('--steps', type=int, help='optimization steps')
        p.add_argument('--no-hull', action='store_true', help='drop the convex hull constraint')
        p.add_argument('--out', required=True, help='optimized cube (.msc1) to write')

        p = self.add_command(sub, common, 'evaluate', self.handle_evaluate,
                             'attack accuracy and cloud confidence on D and E')
        p.add_argument('--model', required=True, help='detector model container (.msdm)')
        p.add_argument('--index', required=True, help='spectral index CSV')
        p.add_argument('--cube', help='attack output (.msc1) to embed; omit for the clean baseline')
        p.add_argument('--scenegen', default=config.DEFAULT_SCENEGEN_FILE,
                       help='ScenegenConfig JSON used to build the attack sets')
        p.add_argument('--config', default=config.DEFAULT_ATTACK_FILE,
                       help='AttackConfig JSON for the baseline (ignored with --cube)')
        p.add_argument('--policy', choices=['random', 'center'], default='random',
                       help='placement of the cube in each evaluated scene')
        p.add_argument('--name', help='row name in the report (default: cube file stem or baseline)')
        p.add_argument('--report', required=True, help='report CSV to write')

        p = self.add_command(sub, common, 'grid', self.handle_grid,
                             'run an experiment grid and write the summary table')
        p.add_argument('--grid', required=True, help='ExperimentGrid JSON')
        p.add_argument('--model', action='append', required=True, metavar='NAME=PATH',
                       help='detector for grid rows, repeatable; a bare path is named default')
        p.add_argument('--index', required=True, help='spectral index CSV')
        p.add_argument('--scenegen', default=config.DEFAULT_SCENEGEN_FILE,
                       help='ScenegenConfig JSON used to build the attack sets')
        p.add_argument('--report', required=True, help='report CSV to write')

        p = self.add_command(sub, common, 'render', self.handle_render,
                             'render cube images and the pixel table')
        p.add_argument('--cube', required=True, help='attack output (.msc1)')
        p.add_argument('--index', required=True, help='spectral index CSV')
        p.add_argument('--roa', help='region of attack cube (.msc1); default: the one saved with the attack')
        p.add_argument('--prefix', help='file name prefix (default: cube file stem)')
        p.add_argument('--out', required=True, help='output directory')
        return parser

    def add_command(self, sub, common: argparse.ArgumentParser, name: str,
                    handler: Callable[[argparse.Namespace], CommandResult], help_text: str) -> argparse.ArgumentParser:
        self.handlers[name] = handler
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    # ------------------------------------------------------------
    # handlers
    # ------------------------------------------------------------

    def handle_build_index(self, args: argparse.Namespace) -> CommandResult:
        outputs = []
        if args.materials:
            library = load_material_library(args.materials, sort_samples=args.sort_samples)
        else:
            library = synth_material_library(args.synth_materials, args.seed or 0)
        if args.materials_out:
            write_material_library(library, args.materials_out)
            outputs.append(args.materials_out)
        index = build_spectral_index(library, load_solar_spectrum(args.solar), load_band_table(args.bands))
        save_spectral_index(index, args.out)
        outputs.append(args.out)
        return CommandResult(args.out, outputs, [args.materials, args.bands, args.solar], seed=args.seed)

    def handle_gen_data(self, args: argparse.Namespace) -> CommandResult:
        cfg = load_config_file(args.config, ScenegenConfig)
        if args.seed is not None:
            cfg = cfg.model_copy(update={'seed': args.seed})
        labels = write_dataset(cfg, args.out, args.splits, args.threads)
        config_copy = os.path.join(args.out, 'scenegen.json')
        config.save_config_file(cfg, config_copy)
        outputs = [os.path.join(args.out, f) for f in labels['file']]
        outputs += [os.path.join(args.out, 'labels.csv'), config_copy]
        return CommandResult(args.out, outputs, config_paths={'scenegen': args.config}, seed=cfg.seed)

    @staticmethod
    def _optional_split(data_dir: str, threshold: float, split: str):
        try:
            return load_labeled_dataset(data_dir, threshold, split)
        except SceneError:
            return None

    def handle_train(self, args: argparse.Namespace) -> CommandResult:
        arch = load_config_file(args.arch, ArchConfig)
        cfg = load_config_file(args.config, TrainConfig)
        if args.seed is not None:
            cfg = cfg.model_copy(update={'seed': args.seed})
        low, high = load_config_file(args.scenegen, ScenegenConfig).thresholds

        th30 = load_labeled_dataset(args.th30, low, 'train')
        th70 = load_labeled_dataset(args.th70, high, 'train')
        model = build_detector(arch, cfg.seed)
        trained = train_two_stage(model, th30, th70, cfg,
                                  self._optional_split(args.th30, low, 'val'),
                                  self._optional_split(args.th70, high, 'val'))
        save_model(trained, args.out)

        stem, _ = os.path.splitext(args.out)
        history_path = args.history or f"{stem}.history.csv"
        pd.DataFrame([asdict(r) for r in trained.history]).to_csv(
            history_path, index=False, float_format='%.8g', na_rep='nan', lineterminator='\n')
        outputs = [args.out, history_path]

        test = self._optional_split(args.th70, high, 'test')
        if test is not None:
            report = evaluate_detector(trained, test)
            summary = asdict(report)
            summary['parameter_count'] = trained.parameter_count
            report_path = f"{stem}.report.json"
            save_json(summary, report_path)
            outputs.append(report_path)
            logger.info(f"DETECTOR_TEST: accuracy={report.accuracy:.4f} fpr={report.false_positive_rate:.4f} "
                        f"footprint={report.footprint_mb:.2f}MB")
        labels = [os.path.join(d, 'labels.csv') for d in {args.th30, args.th70}]
        config_paths = {'arch': args.arch, 'train': args.config, 'scenegen': args.scenegen}
        return CommandResult(args.out, outputs, labels, config_paths, cfg.seed)

    def _attack_config(self, args: argparse.Namespace) -> AttackConfig:
        cfg = load_config_file(args.config, AttackConfig)
        updates = {}
        if getattr(args, 'loss', None):
            updates['loss'] = args.loss
        if getattr(args, 'roa', None):
            updates['roa'] = args.roa
        if getattr(args, 'steps', None) is not None:
            updates['steps'] = args.steps
        if getattr(args, 'no_hull', False):
            updates['hull'] = False
        if args.seed is not None:
            updates['seed'] = args.seed
        return AttackConfig.model_validate({**cfg.model_dump(), **updates})

    def handle_attack(self, args: argparse.Namespace) -> CommandResult:
        detector = load_model(args.model)
        index = load_spectral_index(args.index)
        scenes = load_config_file(args.scenegen, ScenegenConfig)
        cfg = self._attack_config(args)

        sets = build_attack_sets(scenes, detector, (scenes.counts.attack_train, 0), cfg.roa, args.threads)
        q = index.q if cfg.hull else index.matrix.shape[0]
        start = [init_params(slot.height, slot.width, q, cfg.seed, cfg.init_sigma, cfg.hull, key=j)
                 for j, slot in enumerate(cfg.layout)]
        result = optimize_cube(start, sets.train, sets.roa, detector, index, cfg)
        outputs = save_attack_result(result, args.out, index, cfg, cfg.seed)
        return CommandResult(args.out, outputs, [args.model, args.index],
                             {'scenegen': args.scenegen, 'attack': args.config}, cfg.seed)

    def handle_evaluate(self, args: argparse.Namespace) -> CommandResult:
        detector = load_model(args.model)
        index = load_spectral_index(args.index)
        scenes = load_config_file(args.scenegen, ScenegenConfig)
        if args.cube:
            params, cfg, _ = load_attack_result(args.cube)
            name = args.name or os.path.splitext(os.path.basename(args.cube))[0]
        else:
            params, cfg = None, load_config_file(args.config, AttackConfig)
            name = args.name or 'baseline'
        seed = args.seed if args.seed is not None else cfg.seed

        sets = build_attack_sets(scenes, detector, (scenes.counts.attack_train, scenes.counts.attack_test),
                                 None, args.threads)
        report = attack_metrics(detector, sets, params, index, cfg, seed, args.policy)
        row = GridRowResult(name, report.accuracy_train, report.accuracy_test, report.cloudy_train,
                            report.cloudy_test, 1, [report])
        write_report([row], args.report)

        stem, _ = os.path.splitext(args.report)
        confidences_path = f"{stem}.confidences.csv"
        pd.DataFrame(
            [{'split': 'train', 'item': i, 'confidence': c} for i, c in enumerate(report.train_confidences)] +
            [{'split': 'test', 'item': i, 'confidence': c} for i, c in enumerate(report.test_confidences)],
            columns=['split', 'item', 'confidence'],
        ).to_csv(confidences_path, index=False, float_format='%.8f', lineterminator='\n')
        logger.info(f"EVALUATE: {name} acc_train={report.accuracy_train:.4f} acc_test={report.accuracy_test:.4f} "
                    f"cloudy_train={report.cloudy_train:.4f} cloudy_test={report.cloudy_test:.4f}")
        inputs = [args.model, args.index] + ([args.cube] if args.cube else [])
        return CommandResult(args.report, [args.report, confidences_path], inputs,
                             {'scenegen': args.scenegen, 'attack': None if args.cube else args.config}, seed)

    @staticmethod
    def _parse_models(entries: Sequence[str]) -> Dict[str, str]:
        models = {}
        for entry in entries:
            name, sep, path = entry.partition('=')
            if not sep:
                name, path = 'default', entry
            if name in models:
                raise PipelineError(f"detector '{name}' given twice")
            models[name] = path
        return models

    def handle_grid(self, args: argparse.Namespace) -> CommandResult:
        grid = load_config_file(args.grid, ExperimentGrid)
        index = load_spectral_index(args.index)
        scenes = load_config_file(args.scenegen, ScenegenConfig)
        paths = self._parse_models(args.model)
        wanted = {row.detector for row in grid.rows}
        missing = sorted(wanted - set(paths))
        if missing:
            raise PipelineError(f"grid rows need detectors {missing}; pass them as --model NAME=PATH")

        detectors = {name: load_model(paths[name]) for name in sorted(wanted)}
        sizes = (scenes.counts.attack_train, scenes.counts.attack_test)
        attack_sets = {name: build_attack_sets(scenes, det, sizes, None, args.threads)
                       for name, det in detectors.items()}
        results = run_grid(grid, GridAssets(detectors, index, attack_sets), args.threads)

        write_report(results, args.report)
        stem, _ = os.path.splitext(args.report)
        details = write_seed_details(results, f"{stem}.seeds.csv")
        inputs = [args.index] + [paths[n] for n in sorted(wanted)]
        return CommandResult(args.report, [args.report, details], inputs,
                             {'grid': args.grid, 'scenegen': args.scenegen})

    def handle_render(self, args: argparse.Namespace) -> CommandResult:
        params, _, roa = load_attack_result(args.cube)
        if args.roa:
            roa = read_cube(args.roa)
        if roa is None:
            raise PipelineError(f"no region of attack saved with {args.cube}; pass --roa")
        index = load_spectral_index(args.index)
        prefix = args.prefix or os.path.splitext(os.path.basename(args.cube))[0]
        outputs = render_cube_images(params, index, roa, args.out, prefix)
        return CommandResult(args.out, outputs, [args.cube, args.index, args.roa])

    # ------------------------------------------------------------
    # entry
    # ------------------------------------------------------------

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """Run one subcommand; returns the process exit code"""
        argv = list(sys.argv[1:] if argv is None else argv)
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

        setup_logger(None, args.log_file, args.log_level, args.json_logs)
        run_id = RunContext.new_run_id()
        logger.info(f"RUN_START: command={args.command} run_id={run_id}")

        started = time.monotonic()
        try:
            result = self.handlers[args.command](args)
            manifest = build_manifest(args.command, argv, result.config_paths, result.seed,
                                      [p for p in result.inputs if p], result.outputs)
            write_manifest(manifest, manifest_path_for(result.anchor, args.command))
        except (PipelineError, ValidationError, OSError) as e:
            logger.error(f"RUN_FAILED: {args.command}: {e}")
            print(f"advcube {args.command}: error: {str(e).splitlines()[0]}", file=sys.stderr)
            return EXIT_FAILURE
        finally:
            RunContext.clear()

        logger.info(f"RUN_DONE: command={args.command} in {format_duration(time.monotonic() - started)}")
        return EXIT_OK


def run(argv: Optional[Sequence[str]] = None) -> int:
    return AdvCubeCLI().run(argv)


if __name__ == "__main__":
    try:
        sys.exit(run())
    except KeyboardInterrupt:
        logger.info("advcube stopped by user")
        sys.exit(130)
