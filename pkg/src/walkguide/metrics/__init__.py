"""Evaluation metrics: ROUGE, TF-IDF cosine, trigger-level F1 and the pairwise judge."""

from .judge import JudgeSample, Verdict, gpt_score, judge_pair, parse_verdict
from .text import EvalPair, PrfScore, evaluate_pairs, lcs_length, rouge_l, rouge_n, tfidf_similarity, tokenize
from .trf import confusion_matrix, per_class_f1, trf_macro_f1
