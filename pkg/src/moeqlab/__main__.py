import sys

from moeqlab.cli import main

sys.exit(main())
