"""Contextual emotion classification for multi-party dialogues."""

from .corpus import Corpus, Dialogue, EmotionLabel, Utterance, load_corpus
from .errors import CtxemoError, DataError, NumericError
from .tokenizer import TokenVocabulary, build_vocab, load_vocab, pack_dialogue
from .training import Model, TrainConfig, ensemble_predict, post_train, train, train_kfold_ensemble

__version__ = "0.1.0"
