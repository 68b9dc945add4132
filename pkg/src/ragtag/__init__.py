"""ragtag: a workbench for tag-poisoning attacks on RAG-style recommenders.

Pipeline: ingest a MovieLens-format catalog, embed item metadata, build user
profiles, retrieve and rerank recommendations, poison item tags via
local/global adversarial selection, and measure exposure and relevance
shifts before and after the attack.
"""

__version__ = "0.1.0"
