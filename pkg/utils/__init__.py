# Shared helpers: logic clauses, prompts, LLM gateway, grounding and file loaders
