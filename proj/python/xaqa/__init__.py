"""Cross-attention span-extraction QA lab: python bindings for the C++ core."""

from xaqa._core import (  # noqa: F401
    BOS,
    EOS,
    PAD,
    SEP,
    AttentionRecord,
    ContractError,
    DecodeResult,
    GenSpec,
    GoldSpan,
    InferenceConfig,
    Model,
    ModelConfig,
    ParseFileError,
    QAExample,
    ShapeError,
    SpanPrediction,
    SpanStrategy,
    TrainConfig,
    TrainingDiverged,
    evaluate_dev,
    exact_match,
    find_occurrences,
    generate,
    generate_dataset,
    generate_example,
    is_hallucination,
    load_dataset,
    ndcg_at_k,
    precision_at_k,
    render_heatmap,
    run_hallucination_experiment,
    run_inference,
    run_rerank_experiment,
    save_dataset,
    token_f1,
    train,
)

__version__ = "0.1.0"
