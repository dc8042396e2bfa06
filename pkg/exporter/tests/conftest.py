import pytest
import torch

VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "[S1]", "[S2]", "[SUBJ-PER]", "[OBJ-ORG]",
    "speaker", "1", "2", "3", ":", ",", ".", "?", "!", "'",
    "hey", "there", "any", "sign", "of", "your", "sibling", "no", "but",
    "he", "is", "always", "late", "frank", "works", "at", "the", "lab",
    "relax", "will", "arrive", "soon", "my", "mentor", "talk", "to",
    "him", "about", "it", "she", "joined", "acme", "corp", "last", "year",
    "##s", "##ing", "founder",
]


@pytest.fixture(scope="session")
def tiny_encoder(tmp_path_factory):
    """A small randomly initialized BERT saved locally; no network involved."""
    from transformers import BertConfig, BertModel, BertTokenizer

    root = tmp_path_factory.mktemp("tinybert")
    vocab_file = root / "vocab.txt"
    vocab_file.write_text("\n".join(VOCAB), encoding="utf-8")
    tokenizer = BertTokenizer(
        str(vocab_file), do_lower_case=True,
        additional_special_tokens=["[S1]", "[S2]", "[SUBJ-PER]", "[OBJ-ORG]"])
    config = BertConfig(vocab_size=len(VOCAB), hidden_size=32,
                        num_hidden_layers=2, num_attention_heads=2,
                        intermediate_size=64, max_position_embeddings=128)
    torch.manual_seed(7)
    model = BertModel(config)
    model.save_pretrained(str(root))
    tokenizer.save_pretrained(str(root))
    return str(root)
