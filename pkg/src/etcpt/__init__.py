"""Extended token classification (ETC) pre-training for short queries.

A frozen masked-language-model generator fills tokens inserted into a query;
a discriminator learns to flag the inserted positions. MLM and ELECTRA
baselines run on the same harness.
"""
__version__ = "0.1.0"
