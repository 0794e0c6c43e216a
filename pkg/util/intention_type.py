'''
Maneuver and approach-arm vocabulary shared by the scene model, the
intersection map and the simulator.
'''

import enum
from typing import Optional, Tuple


class Intention(enum.IntEnum):

  # The integer value is the position in the one-hot block of the network
  # input. The ordering is frozen: checkpoints record it and refuse to load
  # under a different one.
  LEFT = 0
  STRAIGHT = 1
  RIGHT = 2

  @property
  def label(self) -> str:
    return self.name.capitalize()

  @classmethod
  def parse(cls, value) -> 'Intention':
    """Accepts an Intention, its integer value or a case-insensitive name."""
    if isinstance(value, Intention):
      return value
    if isinstance(value, str):
      try:
        return cls[value.strip().upper()]
      except KeyError:
        raise ValueError(f"Unknown intention '{value}'") from None
    return cls(int(value))

  @classmethod
  def from_arms(cls, entry: 'Arm', exit_arm: 'Arm') -> Optional['Intention']:
    """Right-hand traffic lookup; None for a U-turn (entry == exit)."""
    return _TURN_BY_ARM_STEP.get((int(exit_arm) - int(entry)) % 4)


ONE_HOT_ORDER = tuple(i.label for i in Intention)


class Arm(enum.IntEnum):

  # Counter-clockwise order starting at the bottom of the map. Adjacent
  # values are 90 degrees apart, which is what the turn lookup relies on.
  SOUTH = 0
  EAST = 1
  NORTH = 2
  WEST = 3

  @property
  def outward(self) -> Tuple[float, float]:
    """Unit vector pointing from the intersection center along the arm."""
    return _OUTWARD[self]

  @property
  def is_vertical(self) -> bool:
    return self in (Arm.SOUTH, Arm.NORTH)

  @property
  def opposite(self) -> 'Arm':
    return Arm((int(self) + 2) % 4)

  def exit_for(self, intention: Intention) -> 'Arm':
    step = {Intention.RIGHT: 1, Intention.STRAIGHT: 2, Intention.LEFT: 3}[intention]
    return Arm((int(self) + step) % 4)

  @classmethod
  def parse(cls, value) -> 'Arm':
    if isinstance(value, Arm):
      return value
    if isinstance(value, str):
      try:
        return cls[value.strip().upper()]
      except KeyError:
        raise ValueError(f"Unknown arm '{value}'") from None
    return cls(int(value))

  @classmethod
  def of_position(cls, x: float, y: float) -> 'Arm':
    """Arm whose half-plane wedge contains the point (ties go to the vertical road)."""
    if abs(y) >= abs(x):
      return Arm.NORTH if y > 0 else Arm.SOUTH
    return Arm.EAST if x > 0 else Arm.WEST


_OUTWARD = {
    Arm.SOUTH: (0.0, -1.0),
    Arm.EAST: (1.0, 0.0),
    Arm.NORTH: (0.0, 1.0),
    Arm.WEST: (-1.0, 0.0),
}

# (exit - entry) mod 4 -> maneuver. Entering from the south and leaving
# east is a right turn, leaving west is a left turn.
_TURN_BY_ARM_STEP = {
    1: Intention.RIGHT,
    2: Intention.STRAIGHT,
    3: Intention.LEFT,
}
