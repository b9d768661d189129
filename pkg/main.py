"""
アプリケーションのエントリーポイント

気道枝ラベリングのパイプラインをサブコマンドとして実行します。
各実行は --out ディレクトリに解決済みの設定（config.json）とログを残します。

    python main.py synth --seed 7 --count 3 --out runs/corpus
    python main.py train-cnn --corpus runs/corpus --profile desk --out runs/cnn
    python main.py features --corpus runs/corpus --cnn runs/cnn/cnn.ckpt --out runs/features
    python main.py train-gnn --corpus runs/corpus --features runs/features --arch spgnn --out runs/spgnn
    python main.py predict --cnn runs/cnn/cnn.ckpt --gnn runs/spgnn/gnn.ckpt --volume tree.mhd --out runs/pred
    python main.py eval --corpus runs/corpus --folds 5 --out runs/eval
"""
import argparse
import json
import os
import sys
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from utils import (
    logger, initialize_file_logging, shutdown_file_logging, set_log_level, enable_debug_logging,
    Config, set_config, AirwayLabelerError, ConfigError,
)
from models.anatomy import CLASS_NAMES, class_name
from models.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from models.label_map import extract_patch, read_label_map
from models.tree_graph import TreeGraph
from networks.cnn import CnnConfig, cnn_param_shapes
from networks.gnn import ARCHITECTURES, GnnConfig, gnn_param_shapes, hidden_features, parse_variant
from networks.complexity import cnn_layer_specs, gnn_layer_specs, macs_by_component, params_by_component
from controllers.batch_processor import BatchProcessor
from controllers.metrics import weighted_kappa_linear
from controllers.pipeline import (
    Labeler, TreeFeatures, build_gnn_samples, cnn_anchor_encodings, cross_validate,
    extract_corpus_features, generate_corpus, load_feature_store, read_manifest,
    save_feature_store, volume_to_graph,
)
from controllers.trainer import CnnSample, TrainConfig, params_from_tensors, train_cnn, train_gnn
from views import PatchPreview, ReportView, export_features_csv, format_class_table, pca_reduce

Handler = Callable[[argparse.Namespace, Config, ReportView], None]


# --- 設定の解決 ----------------------------------------------------------------

def _train_config(args: argparse.Namespace, layers: Optional[int] = None,
                  epochs: Optional[int] = None, lr: Optional[float] = None) -> TrainConfig:
    return TrainConfig.from_settings(
        layers=layers,
        lr=lr if lr is not None else getattr(args, "lr", None),
        epochs=epochs if epochs is not None else getattr(args, "epochs", None),
        seed=getattr(args, "seed", None),
        folds=getattr(args, "folds", None),
        batch_size=getattr(args, "batch_size", None),
    )


def _cnn_config(args: argparse.Namespace) -> CnnConfig:
    return CnnConfig.from_settings(args.profile, patch_side=args.patch_side)


def _pe_mode(args: argparse.Namespace) -> Optional[str]:
    if args.no_pe and args.nlpe:
        raise ConfigError("--no-pe and --nlpe cannot be combined")
    if args.no_pe:
        return "none"
    if args.nlpe:
        return "nlpe"
    return None


def _gnn_config(args: argparse.Namespace, name: str, feature_dim: Optional[int] = None) -> GnnConfig:
    """name はアーキテクチャ名か spgnn-nlpe / gcn-skip のようなバリアント名（バリアントがフラグより優先）"""
    values: Dict[str, Any] = {"skip": getattr(args, "skip", None), "pe_mode": _pe_mode(args)}
    values.update(parse_variant(name))
    return GnnConfig.from_settings(layers=args.layers, feature_dim=feature_dim, **values)


def _feature_dim(store: Mapping[str, TreeFeatures]) -> int:
    dims = {t.features.shape[1] for t in store.values()}
    if len(dims) != 1:
        raise ConfigError(f"feature store holds {len(dims)} different feature widths")
    return dims.pop()


def _checkpoint(path: str, kind: str) -> Checkpoint:
    checkpoint = load_checkpoint(path)
    if checkpoint.kind != kind:
        raise ConfigError(f"{path} is a {checkpoint.kind} checkpoint, expected {kind}")
    return checkpoint


def _complexity(cnn_cfg: CnnConfig, gnn_cfg: Optional[GnnConfig],
                num_nodes: int, num_edges: int) -> Dict[str, Dict[str, int]]:
    """
    1ツリーあたりのMACsとパラメーター数

    CNNは枝ごとに1パッチ、GNNはツリー全体で1回と数える。
    num_edges は自己ループを含む有向辺の数。
    """
    specs = cnn_layer_specs(cnn_cfg, batch=num_nodes)
    params = params_by_component(cnn_param_shapes(cnn_cfg))
    if gnn_cfg is not None:
        specs = specs + gnn_layer_specs(gnn_cfg, num_nodes, num_edges)
        for component, count in params_by_component(gnn_param_shapes(gnn_cfg)).items():
            params[component] = params.get(component, 0) + count
    return {"macs": macs_by_component(specs), "params": params}


# --- サブコマンド ---------------------------------------------------------------

def run_synth(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    """合成コーパスを生成する"""
    seed = args.seed if args.seed is not None else int(config.get("train.seed", 0))
    processor = BatchProcessor()
    try:
        corpus = generate_corpus(view.out_dir, seed, args.count, processor=processor,
                                 depth=args.depth, extension_probability=args.extension_probability,
                                 missing_probability=args.missing_probability)
    finally:
        processor.close()
    logger.info(f"合成コーパスを生成しました: {len(corpus)} trees (seed {seed})")


def run_graph(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    """ラベルボリュームから枝グラフJSONを作る"""
    spacing = config.get_target_spacing() if args.resample else None
    _, graph = volume_to_graph(args.volume, spacing)
    stem = os.path.splitext(os.path.basename(args.volume))[0]
    graph.save_json(view.path(f"{stem}.graph.json"))
    logger.info(f"{stem}: {graph.num_nodes} branches, {len(graph.edges)} edges")


def run_train_cnn(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    corpus = read_manifest(args.corpus)
    cnn_cfg = _cnn_config(args)
    train_cfg = _train_config(args)
    samples = [CnnSample(e.tree_id, corpus.load_label_map(e), corpus.load_graph(e)) for e in corpus.entries]
    run = train_cnn(samples, cnn_cfg, train_cfg)
    save_checkpoint(run.checkpoint, view.path("cnn.ckpt"))
    view.save_training_log(run.history, "cnn_training_log.csv")


def run_features(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    corpus = read_manifest(args.corpus)
    checkpoint = _checkpoint(args.cnn, "cnn")
    processor = BatchProcessor()
    try:
        store = extract_corpus_features(corpus, corpus.entries, checkpoint, processor=processor)
    finally:
        processor.close()
    save_feature_store(view.out_dir, store, source=os.path.abspath(args.cnn))


def run_train_gnn(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    corpus = read_manifest(args.corpus)
    store = load_feature_store(args.features)
    gnn_cfg = _gnn_config(args, args.arch, feature_dim=_feature_dim(store))
    train_cfg = _train_config(args, layers=gnn_cfg.layers)
    samples = build_gnn_samples(corpus, corpus.entries, store, gnn_cfg)
    run = train_gnn(samples, gnn_cfg, train_cfg)
    save_checkpoint(run.checkpoint, view.path("gnn.ckpt"))
    view.save_training_log(run.history, "gnn_training_log.csv")


def _labeler(args: argparse.Namespace) -> Labeler:
    cnn_checkpoint = _checkpoint(args.cnn, "cnn")
    gnn_checkpoint = _checkpoint(args.gnn, "gnn") if args.gnn else None
    if args.arch == "cnn" and gnn_checkpoint is not None:
        raise ConfigError("--arch cnn labels with the cnn head only; drop --gnn")
    if args.arch not in (None, "cnn") and gnn_checkpoint is None:
        raise ConfigError(f"--arch {args.arch} needs a --gnn checkpoint")
    labeler = Labeler(cnn_checkpoint, gnn_checkpoint)
    if args.arch not in (None, labeler.mode):
        raise ConfigError(f"--arch {args.arch} does not match the {labeler.mode} checkpoint")
    return labeler


def run_predict(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    """ボリューム（またはコーパスの全ツリー）にラベルを付ける"""
    labeler = _labeler(args)
    predictions = []
    if args.corpus:
        corpus = read_manifest(args.corpus)
        for entry in corpus.entries:
            predictions.append(labeler.label(corpus.load_label_map(entry), corpus.load_graph(entry), entry.tree_id))
    else:
        spacing = config.get_target_spacing() if args.resample else None
        label_map, graph = volume_to_graph(args.volume, spacing)
        if args.graph:
            if spacing is not None:
                raise ConfigError("--graph refers to the input grid; it cannot be combined with --resample")
            graph = TreeGraph.load_json(args.graph)
        tree_id = os.path.splitext(os.path.basename(args.volume))[0]
        predictions.append(labeler.label(label_map, graph, tree_id))

    for prediction in predictions:
        view.save_prediction(prediction.to_json_dict())
    seconds = [p.seconds for p in predictions]
    view.save_timing({labeler.mode: {"mean": float(np.mean(seconds)), "std": float(np.std(seconds)),
                                     "trees": len(seconds)}})


def _archs(text: str) -> List[str]:
    names = [name.strip() for name in text.split(",") if name.strip()]
    if not names:
        raise ConfigError(f"--archs takes a comma list of cnn,{','.join(ARCHITECTURES)}; got {text!r}")
    for name in names:
        if name != "cnn":
            parse_variant(name)
    if len(set(names)) != len(names):
        raise ConfigError(f"--archs lists a model twice: {text!r}")
    return names


def run_eval(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    """k分割交差検証で各モデルを評価する"""
    corpus = read_manifest(args.corpus)
    cnn_cfg = _cnn_config(args)
    cnn_train = _train_config(args, epochs=args.cnn_epochs, lr=args.cnn_lr)
    variants: Dict[str, Optional[GnnConfig]] = {}
    gnn_train: Dict[str, TrainConfig] = {}
    for name in _archs(args.archs):
        if name == "cnn":
            variants[name] = None
            continue
        variants[name] = GnnConfig.from_settings(layers=args.layers, feature_dim=cnn_cfg.feature_dim,
                                                 **parse_variant(name))
        gnn_train[name] = _train_config(args, layers=variants[name].layers, epochs=args.gnn_epochs)

    processor = BatchProcessor()
    try:
        cv = cross_validate(corpus, cnn_cfg, cnn_train, variants, gnn_train,
                            folds=cnn_train.folds, seed=cnn_train.seed, processor=processor)
    finally:
        processor.close()

    graphs = [corpus.load_graph(e) for e in corpus.entries]
    num_nodes = int(round(np.mean([g.num_nodes for g in graphs])))
    num_edges = int(round(np.mean([2 * len(g.edges) + g.num_nodes for g in graphs])))
    complexity = {name: _complexity(cnn_cfg, gnn_cfg, num_nodes, num_edges) for name, gnn_cfg in variants.items()}

    results = {name: result.metrics for name, result in cv.results.items()}
    view.save_metrics(results, complexity, [{"train": train, "test": test} for train, test in cv.folds])
    view.save_class_table(results)
    view.save_timing({name: result.timing for name, result in cv.results.items()})
    for fold, run in enumerate(cv.cnn_runs, start=1):
        view.save_training_log(run.history, f"cnn_fold{fold}.csv")
    for name, runs in cv.gnn_runs.items():
        for fold, run in enumerate(runs, start=1):
            view.save_training_log(run.history, f"{name}_fold{fold}.csv")
    print(format_class_table(results), end="")


def run_macs(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    """MACsとパラメーター数を数える"""
    cnn_cfg = _cnn_config(args)
    if args.graph:
        graph = TreeGraph.load_json(args.graph)
        num_nodes, num_edges = graph.num_nodes, 2 * len(graph.edges) + graph.num_nodes
    else:
        num_nodes, num_edges = args.nodes, 2 * (args.nodes - 1) + args.nodes
    complexity = {"cnn_patch": _complexity(cnn_cfg, None, 1, 1)}
    for name in _archs(args.archs):
        gnn_cfg = None if name == "cnn" else _gnn_config(args, name, feature_dim=cnn_cfg.feature_dim)
        complexity[name] = _complexity(cnn_cfg, gnn_cfg, num_nodes, num_edges)
    view.save_complexity(complexity)


def run_export_features(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    """
    枝特徴をツリーごとのCSVに書き出す

    --gnn を渡すとGNNの最終層の特徴、--pca を渡すと全ツリーをまとめて主成分に射影した値を書く。
    """
    corpus = read_manifest(args.corpus)
    store = load_feature_store(args.features)
    gnn = None
    if args.gnn:
        checkpoint = _checkpoint(args.gnn, "gnn")
        gnn = (params_from_tensors(checkpoint.tensors), GnnConfig.from_dict(checkpoint.config["gnn"]))

    entries = [e for e in corpus.entries if e.tree_id in store]
    if not entries:
        raise ConfigError(f"no tree of {args.corpus} has features in {args.features}")
    graphs = [corpus.load_graph(e) for e in entries]
    matrices = []
    for entry, graph in zip(entries, graphs):
        tree_features = store[entry.tree_id]
        if gnn is None:
            matrices.append(tree_features.features)
            continue
        params, gnn_cfg = gnn
        encodings = cnn_anchor_encodings(graph, tree_features.probs) if gnn_cfg.uses_pe else None
        matrices.append(hidden_features(params, tree_features.features, encodings, graph, gnn_cfg))

    if args.pca:
        rows = np.cumsum([m.shape[0] for m in matrices])[:-1]
        matrices = np.split(pca_reduce(np.concatenate(matrices), args.pca), rows)

    for entry, graph, matrix in zip(entries, graphs, matrices):
        labels = [graph.label_of(node) for node in graph.node_ids]
        export_features_csv(matrix, labels, view.path(f"{entry.tree_id}.csv"), branch_ids=graph.node_ids)


def _ratings(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            ratings = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid ratings file {path}: {e}") from e
    if isinstance(ratings, dict):
        ratings = ratings.get("ratings")
    if not isinstance(ratings, list):
        raise ConfigError(f"ratings file must hold a JSON list: {path}")
    return [class_name(r) if isinstance(r, int) else str(r) for r in ratings]


def run_kappa(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    """2人の評価者のラベル列から線形重み付きカッパを計算する"""
    result = weighted_kappa_linear(_ratings(args.ratings_a), _ratings(args.ratings_b), CLASS_NAMES)
    view.save_kappa(result)


def run_preview(args: argparse.Namespace, config: Config, view: ReportView) -> None:
    label_map = read_label_map(args.volume)
    side = _cnn_config(args).patch_side
    patch = extract_patch(label_map, args.branch, side)
    PatchPreview(scale=args.scale).save(patch, view.path(f"branch_{args.branch}.png"))


# --- 引数 ---------------------------------------------------------------------

def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="マージするJSON設定ファイル")
    common.add_argument("--debug", action="store_true", help="デバッグログを有効にする")
    common.add_argument("--out", default="out", help="出力ディレクトリ（既定: out）")
    return common


def _add_cnn_options(parser: argparse.ArgumentParser, profile: str = "cnn") -> None:
    parser.add_argument("--profile", choices=("cnn", "desk"), default=profile, help="CNNの構成")
    parser.add_argument("--patch-side", type=int, help="パッチの一辺（ボクセル）")


def _add_train_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float, help="学習率")
    parser.add_argument("--epochs", type=int, help="エポック数")
    parser.add_argument("--seed", type=int, help="乱数シード")


def _add_gnn_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--layers", type=int, choices=(2, 4, 7), help="層の数")
    parser.add_argument("--skip", action=argparse.BooleanOptionalAction, default=None,
                        help="スキップ接続（既定はアーキテクチャごと）")
    parser.add_argument("--no-pe", action="store_true", help="位置エンコーディングを使わない")
    parser.add_argument("--nlpe", action="store_true", help="学習しない位置エンコーディング")


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="airway-labeler", description="気道区域枝の自動ラベリング")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, handler: Handler, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    sub = command("synth", run_synth, "合成コーパスを生成する")
    sub.add_argument("--seed", type=int, help="最初のツリーのシード")
    sub.add_argument("--count", type=int, default=10, help="ツリーの数")
    sub.add_argument("--depth", type=int, help="区域枝以下の世代数（4〜6）")
    sub.add_argument("--extension-probability", type=float, help="亜区域枝が分岐する確率（0 ならテンプレートのみ）")
    sub.add_argument("--missing-probability", type=float)

    sub = command("graph", run_graph, "ラベルボリュームから枝グラフを作る")
    sub.add_argument("--volume", required=True, help="MetaImage (.mhd)")
    sub.add_argument("--resample", action="store_true", help="volume.target_spacing に再サンプリングする")

    sub = command("train-cnn", run_train_cnn, "枝パッチCNNを学習する")
    sub.add_argument("--corpus", required=True)
    _add_cnn_options(sub)
    _add_train_options(sub)
    sub.add_argument("--batch-size", type=int)

    sub = command("features", run_features, "CNN特徴とクラス確率を求める")
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--cnn", required=True, help="CNNチェックポイント")

    sub = command("train-gnn", run_train_gnn, "CNN特徴の上でGNNを学習する")
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--features", required=True, help="features コマンドの出力ディレクトリ")
    sub.add_argument("--arch", choices=ARCHITECTURES, default="spgnn")
    _add_gnn_options(sub)
    _add_train_options(sub)

    sub = command("predict", run_predict, "枝にラベルを付ける")
    source = sub.add_mutually_exclusive_group(required=True)
    source.add_argument("--volume", help="MetaImage (.mhd)")
    source.add_argument("--corpus", help="コーパスの全ツリーにラベルを付ける")
    sub.add_argument("--graph", help="--volume に対応する枝グラフJSON")
    sub.add_argument("--resample", action="store_true")
    sub.add_argument("--cnn", required=True, help="CNNチェックポイント")
    sub.add_argument("--gnn", help="GNNチェックポイント（省略時はCNNのみ）")
    sub.add_argument("--arch", choices=("cnn",) + ARCHITECTURES, help="使うモデルの確認")

    sub = command("eval", run_eval, "k分割交差検証")
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--folds", type=int)
    sub.add_argument("--archs", default="cnn,gats,spgnn", help="評価するモデル（カンマ区切り、spgnn-nlpe や gcn-skip も可）")
    sub.add_argument("--layers", type=int, choices=(2, 4, 7))
    sub.add_argument("--cnn-epochs", type=int)
    sub.add_argument("--gnn-epochs", type=int)
    sub.add_argument("--cnn-lr", type=float)
    _add_cnn_options(sub, profile="desk")
    _add_train_options(sub)

    sub = command("macs", run_macs, "MACsとパラメーター数を数える")
    _add_cnn_options(sub)
    _add_gnn_options(sub)
    sub.add_argument("--archs", default="cnn,spgnn")
    sub.add_argument("--nodes", type=int, default=60, help="1ツリーの枝の数")
    sub.add_argument("--graph", help="枝の数と辺の数を取る枝グラフJSON")

    sub = command("export-features", run_export_features, "枝特徴をCSVに書き出す")
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--features", required=True)
    sub.add_argument("--gnn", help="GNNの最終層の特徴を書き出す")
    sub.add_argument("--pca", type=int, help="主成分の数")

    sub = command("kappa", run_kappa, "線形重み付きカッパ")
    sub.add_argument("--ratings-a", required=True, help="評価者AのラベルJSON")
    sub.add_argument("--ratings-b", required=True, help="評価者BのラベルJSON")

    sub = command("preview", run_preview, "パッチの断面PNG")
    sub.add_argument("--volume", required=True)
    sub.add_argument("--branch", type=int, required=True)
    sub.add_argument("--scale", type=int, default=4)
    _add_cnn_options(sub, profile="desk")
    return parser


def _resolve(args: argparse.Namespace) -> Config:
    config = Config(args.config)
    config.apply_overrides({"app.debug_mode": True if args.debug else None})
    set_config(config)
    return config


def dispatch(argv: Sequence[str]) -> int:
    """
    サブコマンドを実行する

    Returns:
        int: 0 = 成功、1 = 実行時エラー、2 = 引数エラー
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return int(e.code or 0)

    previous_level = logger.level
    try:
        config = _resolve(args)
        if config.get("app.debug_mode"):
            enable_debug_logging()
        view = ReportView(args.out)
        initialize_file_logging(args.out)
        run: Dict[str, Any] = {"command": args.command,
                               "args": {k: v for k, v in sorted(vars(args).items()) if k != "handler"}}
        config.save(view.path("config.json"), extra=run)
        logger.info(f"{args.command} を実行します: out={os.path.abspath(args.out)}")
        args.handler(args, config, view)
        logger.info(f"{args.command} が完了しました")
        return 0
    except (AirwayLabelerError, OSError, ValueError) as e:
        logger.debug("コマンドが失敗しました", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    finally:
        shutdown_file_logging()
        set_log_level(previous_level)


def main():
    """アプリケーションのメイン関数"""
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
