"""
Token layout for the three alphabets.

Text symbols: numbers 0..31, then the operators and the MOD marker.
Audio frames: a fixed permutation of the text symbols, one frame class each.
Output tokens: numbers 0..31, then ANSWER and EOS.
"""
import numpy as np

MAX_NUMBER = 31  # largest modulus allowed

OPERATORS = ('+', '-', '*')

# Text alphabet
TEXT_NUMBER_BASE = 0
TEXT_OPERATOR_IDS = {op: MAX_NUMBER + 1 + i for i, op in enumerate(OPERATORS)}
TEXT_OPERATORS_BY_ID = {token: op for op, token in TEXT_OPERATOR_IDS.items()}
TEXT_MOD = MAX_NUMBER + 1 + len(OPERATORS)
TEXT_VOCAB_SIZE = TEXT_MOD + 1

# Audio alphabet
AUDIO_VOCAB_SIZE = TEXT_VOCAB_SIZE
AUDIO_LAYOUT_SEED = 20240601
FRAME_OF_SYMBOL = np.random.default_rng(AUDIO_LAYOUT_SEED).permutation(TEXT_VOCAB_SIZE)
SYMBOL_OF_FRAME = np.argsort(FRAME_OF_SYMBOL)

# Output alphabet
ANSWER = MAX_NUMBER + 1
EOS = ANSWER + 1
OUTPUT_VOCAB_SIZE = EOS + 1

AUX_LABELS = ('low', 'mid', 'high')


def confusables(frame):
    """The two frames a given frame can be misheard as"""
    return (int((frame - 1) % AUDIO_VOCAB_SIZE), int((frame + 1) % AUDIO_VOCAB_SIZE))


def is_number_token(token):
    return 0 <= token <= MAX_NUMBER


def describe_output(tokens):
    """Human-readable rendering of an output token sequence"""
    names = []
    for token in tokens:
        if token == ANSWER:
            names.append('ANSWER')
        elif token == EOS:
            names.append('EOS')
        else:
            names.append(str(token))
    return ' '.join(names)
