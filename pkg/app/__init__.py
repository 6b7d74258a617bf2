"""PSLA attention, PDN impedance analysis and shaped REINFORCE for capacitor placement."""

__version__ = "0.1.0"
