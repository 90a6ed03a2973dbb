from lidarcal.cli import main

raise SystemExit(main())
