"""
Compressive slice-and-view simulator: targeted subsampling and patch dictionary inpainting of FIB-SEM style volume stacks.
"""
