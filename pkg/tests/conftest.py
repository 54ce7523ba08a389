from mfcl.perf import tune_allocator

tune_allocator()
