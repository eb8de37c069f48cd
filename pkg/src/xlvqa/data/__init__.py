from .vocab import (
    ANSWER_CLASSES,
    ANSWER_INDEX,
    ATTRIBUTES,
    CLS,
    COLON,
    COLORS,
    MASK,
    MATERIALS,
    PAD,
    QMARK,
    QTYPES,
    SEP,
    SHAPES,
    SIZES,
    LanguageSpec,
    Vocabulary,
    build_vocabulary,
)
from .scenes import (
    FeatureSpace,
    Scene,
    SceneConfig,
    SceneConstraintError,
    SceneObject,
    VisualFeatures,
    generate_scene,
)
from .questions import (
    ChooseAttr,
    CompareSize,
    ComparisonTieError,
    Descriptor,
    Exists,
    ExistsEither,
    HasAttr,
    HasBoth,
    InadmissibleSceneError,
    Question,
    QueryAttr,
    ReferentError,
    answer_support,
    derive_answer,
    generate_question,
    resolve,
    unique_descriptor,
)
from .languages import apply_order, qtype_prefix, render, render_concepts
from .bias import BiasSpec, assign_cue
from .corpus import (
    GQA_TESTDEV_QTYPE_COUNTS,
    CaptionRecord,
    DataConfig,
    Dataset,
    DatasetSplits,
    FewshotPool,
    LanguageConfig,
    PretrainCorpus,
    QuestionRecord,
    Split,
    build_corpus_and_splits,
    inject_text_bias,
    load_dataset,
    save_dataset,
)
