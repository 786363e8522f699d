from momentfilter.cli import main

raise SystemExit(main())
