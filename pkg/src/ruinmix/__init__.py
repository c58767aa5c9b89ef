"""State-dependent mixture importance sampling for heavy-tailed ruin probabilities."""
