"""Honeypot-head defense against model extraction, in plain numpy.

A victim classifier's head is replaced by a fine-tuned honeypot layer whose
soft outputs plant a patch-trigger backdoor in any substitute trained on
them; the trigger then serves as an ownership check.
"""
from .data import Dataset, DatasetSpec, class_balanced_subset, generate, read_dataset, write_dataset
from .defense import (BloConfig, ProtectedModel, Trigger, apply_trigger, init_trigger, run_blo,
                      load_trigger, save_trigger)
from .errors import CodecError, ConfigError, HoneypotError, NumericError, TrainingError, UsageError
from .evaluation import (attack_success_rate, clean_accuracy, emit_report, reverse_attack,
                         verification_accuracy, verify_ownership)
from .extraction import AttackConfig, build_transfer_set, train_substitute
from .nn import Network, grad_check
from .seeding import derive_seed, make_rng
from .victim import VictimModel, load_checkpoint, save_checkpoint, train_victim

__version__ = "0.1.0"
